//! Named parameter store with paired gradient buffers.
//!
//! Registration order is the canonical order everywhere: optimizer state,
//! checkpoint payload, and gradient-check reports all follow it, which keeps
//! every run of the same model bit-reproducible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Index of a parameter in its [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct Params<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name:?}"
        );
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry { name, value, grad });
        ParamId(self.entries.len() - 1)
    }

    /// Registers a tensor initialized uniformly in
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..shape.len())
            .map(|_| S::from_f64(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<S>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(S::zero());
        }
    }

    /// Snapshot of all values, in registration order.
    pub fn snapshot(&self) -> Vec<Tensor<S>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Restores a snapshot taken from the same store layout.
    pub fn restore(&mut self, snapshot: &[Tensor<S>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            assert_eq!(e.value.shape(), s.shape());
            e.value = s.clone();
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> S {
        self.entries
            .iter()
            .map(|e| e.grad.squared_sum())
            .sum::<S>()
            .sqrt()
    }

    /// Scales all gradients so the global L2 norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_grads(&mut self, max_norm: S) -> S {
        let norm = self.grad_norm();
        if norm > max_norm {
            let factor = max_norm / norm;
            for e in &mut self.entries {
                e.grad.scale_assign(factor);
            }
        }
        norm
    }
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registration_order_is_stable() {
        let mut p: Params<f64> = Params::new();
        let a = p.add("a", Tensor::vector(vec![1.0, 2.0]));
        let b = p.add("b", Tensor::scalar(3.0));
        assert_eq!(p.entry(a).name, "a");
        assert_eq!(p.entry(b).name, "b");
        assert_eq!(p.total_len(), 3);
        let names: Vec<_> = p.iter().map(|(_, e)| e.name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p: Params<f64> = Params::new();
        let id = p.add_uniform("w", Shape::matrix(10, 16), 16, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(p.value(id).data().iter().all(|x| x.abs() < bound));
        // Same seed, same draws.
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let mut p2: Params<f64> = Params::new();
        let id2 = p2.add_uniform("w", Shape::matrix(10, 16), 16, &mut rng2);
        assert_eq!(p.value(id).data(), p2.value(id2).data());
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut p: Params<f64> = Params::new();
        let id = p.add("w", Tensor::vector(vec![0.0, 0.0]));
        p.grad_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        let norm = p.clip_grads(1.0);
        assert_eq!(norm, 5.0);
        assert!((p.grad(id).squared_sum().sqrt() - 1.0).abs() < 1e-12);
        // Below the threshold nothing changes.
        let before = p.grad(id).clone();
        p.clip_grads(10.0);
        assert_eq!(p.grad(id), &before);
    }
}
