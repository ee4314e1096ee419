//! Adam optimizer with bias correction.

use crate::params::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<S> {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &Params<S>, cfg: AdamConfig) -> Self {
        let m = params
            .iter()
            .map(|(_, e)| Tensor::zeros(e.value.shape()))
            .collect();
        let v = params
            .iter()
            .map(|(_, e)| Tensor::zeros(e.value.shape()))
            .collect();
        Adam { cfg, t: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients currently held in `params`.
    /// Gradients are left untouched; the caller zeroes them.
    pub fn step(&mut self, params: &mut Params<S>) {
        self.t += 1;
        let lr = S::from_f64(self.cfg.lr);
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let eps = S::from_f64(self.cfg.eps);
        let one = S::one();
        let bc1 = one - S::from_f64(self.cfg.beta1.powi(self.t as i32));
        let bc2 = one - S::from_f64(self.cfg.beta2.powi(self.t as i32));

        for i in 0..params.len() {
            let id = crate::params::ParamId(i);
            let grad = params.grad(id).clone();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let value = params.value_mut(id);
            for j in 0..grad.len() {
                let g = grad.at(j);
                let mj = &mut m.data_mut()[j];
                *mj = b1 * *mj + (one - b1) * g;
                let vj = &mut v.data_mut()[j];
                *vj = b2 * *vj + (one - b2) * g * g;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                value.data_mut()[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
