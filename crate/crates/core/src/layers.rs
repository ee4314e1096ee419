//! Differentiable building blocks: affine maps, two-layer FFNs, stacked
//! GRUs, and additive attention.
//!
//! A layer owns only [`ParamId`]s; the forward methods replay the math on a
//! caller-supplied [`Graph`]. All weights initialize uniformly in
//! `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.

use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, Params};
use crate::scalar::Scalar;
use crate::tensor::Shape;
use crate::Result;

/// `y = W x + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Linear {
        let w = params.add_uniform(
            format!("{name}.w"),
            Shape::matrix(out_dim, in_dim),
            in_dim,
            rng,
        );
        let b = params.add_uniform(format!("{name}.b"), Shape::vector(out_dim), in_dim, rng);
        Linear { w, b }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        params: &Params<S>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        let wx = g.matmul(w, x)?;
        g.add(wx, b)
    }
}

/// Two-layer feed-forward net: `y = W2 tanh(W1 x + b1) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct Ffn2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn2 {
    pub fn register<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
    ) -> Ffn2 {
        let l1 = Linear::register(params, rng, &format!("{name}.l1"), in_dim, hidden_dim);
        let l2 = Linear::register(params, rng, &format!("{name}.l2"), hidden_dim, out_dim);
        Ffn2 { l1, l2 }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        params: &Params<S>,
        x: Var,
    ) -> Result<Var> {
        let h = self.l1.forward(g, params, x)?;
        let h = g.tanh(h)?;
        self.l2.forward(g, params, h)
    }
}

/// One GRU layer with concatenated-input gates:
/// `z = sigmoid(Wz [x; h] + bz)`, `r = sigmoid(Wr [x; h] + br)`,
/// `c = tanh(Wh [x; r * h] + bh)`, `h' = z * h + (1 - z) * c`.
#[derive(Clone, Copy, Debug)]
struct GruLayer {
    wz: ParamId,
    bz: ParamId,
    wr: ParamId,
    br: ParamId,
    wh: ParamId,
    bh: ParamId,
}

impl GruLayer {
    fn register<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> GruLayer {
        let fan_in = in_dim + hidden;
        let gate = |suffix: &str, p: &mut Params<S>, r: &mut ChaCha8Rng| {
            (
                p.add_uniform(
                    format!("{name}.w{suffix}"),
                    Shape::matrix(hidden, fan_in),
                    fan_in,
                    r,
                ),
                p.add_uniform(format!("{name}.b{suffix}"), Shape::vector(hidden), fan_in, r),
            )
        };
        let (wz, bz) = gate("z", params, rng);
        let (wr, br) = gate("r", params, rng);
        let (wh, bh) = gate("h", params, rng);
        GruLayer {
            wz,
            bz,
            wr,
            br,
            wh,
            bh,
        }
    }

    fn step<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        params: &Params<S>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let hidden = g.shape(h).len();
        let xh = g.concat(&[x, h])?;
        let wz = g.param(params, self.wz);
        let bz = g.param(params, self.bz);
        let zi = g.matmul(wz, xh)?;
        let zi = g.add(zi, bz)?;
        let z = g.sigmoid(zi)?;
        let wr = g.param(params, self.wr);
        let br = g.param(params, self.br);
        let ri = g.matmul(wr, xh)?;
        let ri = g.add(ri, br)?;
        let r = g.sigmoid(ri)?;
        let rh = g.mul(r, h)?;
        let xrh = g.concat(&[x, rh])?;
        let wh = g.param(params, self.wh);
        let bh = g.param(params, self.bh);
        let ci = g.matmul(wh, xrh)?;
        let ci = g.add(ci, bh)?;
        let c = g.tanh(ci)?;
        let zh = g.mul(z, h)?;
        let ones = g.ones_const(hidden);
        let one_minus_z = g.sub(ones, z)?;
        let zc = g.mul(one_minus_z, c)?;
        g.add(zh, zc)
    }
}

/// Stack of GRU layers; layer `l >= 1` reads layer `l - 1`'s new state.
#[derive(Clone, Debug)]
pub struct GruStack {
    layers: Vec<GruLayer>,
    hidden: usize,
}

impl GruStack {
    pub fn register<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input_dim: usize,
        hidden: usize,
        num_layers: usize,
    ) -> GruStack {
        assert!(num_layers >= 1);
        let layers = (0..num_layers)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { hidden };
                GruLayer::register(params, rng, &format!("{name}.l{l}"), in_dim, hidden)
            })
            .collect();
        GruStack { layers, hidden }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state<S: Scalar>(&self, g: &mut Graph<S>) -> Vec<Var> {
        (0..self.layers.len())
            .map(|_| g.zeros_const(self.hidden))
            .collect()
    }

    /// Every layer starts from the same vector (a goal embedding or a
    /// projected context).
    pub fn broadcast_state(&self, init: Var) -> Vec<Var> {
        vec![init; self.layers.len()]
    }

    /// Advances all layers by one input; returns the new per-layer states.
    pub fn step<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        params: &Params<S>,
        x: Var,
        state: &[Var],
    ) -> Result<Vec<Var>> {
        assert_eq!(state.len(), self.layers.len());
        let mut new_state = Vec::with_capacity(self.layers.len());
        let mut input = x;
        for (layer, &h) in self.layers.iter().zip(state) {
            let h_new = layer.step(g, params, input, h)?;
            new_state.push(h_new);
            input = h_new;
        }
        Ok(new_state)
    }
}

/// Additive attention: scores come from a two-layer FFN over
/// `[query; key]`, weights from a softmax, and the output is the
/// weight-averaged value vector.
#[derive(Clone, Copy, Debug)]
pub struct AdditiveAttention {
    score: Ffn2,
}

impl AdditiveAttention {
    pub fn register<S: Scalar>(
        params: &mut Params<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        hidden_dim: usize,
    ) -> AdditiveAttention {
        let score = Ffn2::register(
            params,
            rng,
            &format!("{name}.score"),
            query_dim + key_dim,
            hidden_dim,
            1,
        );
        AdditiveAttention { score }
    }

    /// Returns the context vector and the attention weights over `keys`.
    /// `keys` and `values` pair up one-to-one and must be non-empty.
    pub fn attend<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        params: &Params<S>,
        query: Var,
        keys: &[Var],
        values: &[Var],
    ) -> Result<(Var, Var)> {
        assert_eq!(keys.len(), values.len());
        assert!(!keys.is_empty(), "attention over an empty key set");
        let mut scores = Vec::with_capacity(keys.len());
        for &k in keys {
            let qk = g.concat(&[query, k])?;
            scores.push(self.score.forward(g, params, qk)?);
        }
        let score_vec = g.concat(&scores)?;
        let weights = g.softmax(score_vec, 0)?;
        let mut context: Option<Var> = None;
        for (i, &v) in values.iter().enumerate() {
            let wi = g.slice(weights, i, 1)?;
            let wv = g.mul(wi, v)?;
            context = Some(match context {
                Some(acc) => g.add(acc, wv)?,
                None => wv,
            });
        }
        Ok((context.expect("non-empty values"), weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn zero_weight_gru_halves_state() {
        // With all weights and biases zero: z = 0.5, r = 0.5, c = 0, so
        // h' = 0.5 h.
        let mut params: Params<f64> = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gru = GruStack::register(&mut params, &mut rng, "gru", 2, 3, 1);
        for i in 0..params.len() {
            params.value_mut(ParamId(i)).fill(0.0);
        }
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, -1.0]));
        let h = g.constant(Tensor::vector(vec![0.4, -0.8, 0.2]));
        let out = gru.step(&mut g, &params, x, &[h]).unwrap();
        let got = g.value(out[0]).data();
        assert_eq!(got, &[0.2, -0.4, 0.1]);
    }

    #[test]
    fn stacked_layers_feed_upward() {
        let mut params: Params<f64> = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gru = GruStack::register(&mut params, &mut rng, "gru", 2, 3, 2);
        assert_eq!(gru.num_layers(), 2);
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.3, 0.7]));
        let state = gru.zero_state(&mut g);
        let next = gru.step(&mut g, &params, x, &state).unwrap();
        assert_eq!(next.len(), 2);
        assert_ne!(g.value(next[0]).data(), g.value(next[1]).data());
    }

    #[test]
    fn attention_weights_are_normalized() {
        let mut params: Params<f64> = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let att = AdditiveAttention::register(&mut params, &mut rng, "att", 3, 3, 4);
        let mut g: Graph<f64> = Graph::new();
        let q = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let keys: Vec<Var> = (0..3)
            .map(|i| g.constant(Tensor::vector(vec![i as f64, 1.0, -0.5])))
            .collect();
        let (ctx, weights) = att.attend(&mut g, &params, q, &keys, &keys).unwrap();
        let w: f64 = g.value(weights).data().iter().sum();
        assert!((w - 1.0).abs() < 1e-12);
        assert_eq!(g.value(ctx).len(), 3);
    }

    #[test]
    fn single_key_attention_returns_its_value() {
        let mut params: Params<f64> = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let att = AdditiveAttention::register(&mut params, &mut rng, "att", 2, 2, 4);
        let mut g: Graph<f64> = Graph::new();
        let q = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let k = g.constant(Tensor::vector(vec![0.5, 0.5]));
        let v = g.constant(Tensor::vector(vec![7.0, -2.0]));
        let (ctx, weights) = att.attend(&mut g, &params, q, &[k], &[v]).unwrap();
        assert_eq!(g.value(weights).data(), &[1.0]);
        assert_eq!(g.value(ctx).data(), &[7.0, -2.0]);
    }

    #[test]
    fn ffn_with_zero_weights_outputs_bias() {
        let mut params: Params<f64> = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ffn = Ffn2::register(&mut params, &mut rng, "ffn", 3, 4, 2);
        for i in 0..params.len() {
            params.value_mut(ParamId(i)).fill(0.0);
        }
        params.value_mut(ffn.l2.b).data_mut().copy_from_slice(&[1.5, -2.5]);
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::vector(vec![9.0, 9.0, 9.0]));
        let y = ffn.forward(&mut g, &params, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -2.5]);
    }
}
