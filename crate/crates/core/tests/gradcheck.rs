//! Finite-difference verification: every graph op in isolation, stacked
//! composites, and the three full models on the teacher-forced dialogue
//! loss.

use goaldial_core::gradcheck::{grad_check, grad_check_model, micro_fixture, DEFAULT_STEP};
use goaldial_core::models::{Model, ModelConfig, ModelKind};
use goaldial_core::params::{ParamId, Params};
use goaldial_core::tensor::Tensor;

const OP_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-4;

fn vec_param(params: &mut Params<f64>, name: &str, data: &[f64]) -> ParamId {
    params.add(name, Tensor::vector(data.to_vec()))
}

#[test]
fn op_matmul_add_sub_mul() {
    let mut params: Params<f64> = Params::new();
    params.add("w", Tensor::matrix(3, 2, vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4]));
    vec_param(&mut params, "x", &[0.9, -0.6]);
    vec_param(&mut params, "b", &[0.2, -0.1, 0.05]);
    vec_param(&mut params, "m", &[1.1, -0.3, 0.8]);
    let report = grad_check(&mut params, DEFAULT_STEP, |g, p| {
        let w = g.param(p, ParamId(0));
        let x = g.param(p, ParamId(1));
        let b = g.param(p, ParamId(2));
        let m = g.param(p, ParamId(3));
        let y = g.matmul(w, x)?;
        let y = g.add(y, b)?;
        let d = g.sub(y, m)?;
        let z = g.mul(d, m)?;
        g.sum(z)
    })
    .unwrap();
    assert!(report.passes(OP_TOL), "{}", report.render());
}

#[test]
fn op_activations_and_log() {
    let mut params: Params<f64> = Params::new();
    vec_param(&mut params, "x", &[0.9, -0.6, 0.2, 1.4]);
    let report = grad_check(&mut params, DEFAULT_STEP, |g, p| {
        let x = g.param(p, ParamId(0));
        let s = g.sigmoid(x)?;
        let t = g.tanh(s)?;
        // log of a sigmoid output stays in (0, 1), no domain risk
        let l = g.log(s)?;
        let sum_t = g.sum(t)?;
        let sum_l = g.sum(l)?;
        let both = g.add(sum_t, sum_l)?;
        g.mean(both)
    })
    .unwrap();
    assert!(report.passes(OP_TOL), "{}", report.render());
}

#[test]
fn op_softmax_and_cross_entropy() {
    let mut params: Params<f64> = Params::new();
    vec_param(&mut params, "logits", &[0.3, -1.2, 0.8, 0.1]);
    vec_param(&mut params, "weights", &[0.5, 1.5, -0.25, 0.75]);
    let report = grad_check(&mut params, DEFAULT_STEP, |g, p| {
        let logits = g.param(p, ParamId(0));
        let w = g.param(p, ParamId(1));
        let sm = g.softmax(logits, 0)?;
        let weighted = g.mul(sm, w)?;
        let a = g.sum(weighted)?;
        let ce = g.cross_entropy(logits, 2)?;
        g.add(a, ce)
    })
    .unwrap();
    assert!(report.passes(OP_TOL), "{}", report.render());
}

#[test]
fn op_binary_cross_entropy_both_labels() {
    let mut params: Params<f64> = Params::new();
    vec_param(&mut params, "x", &[0.7]);
    vec_param(&mut params, "y", &[-1.3]);
    let report = grad_check(&mut params, DEFAULT_STEP, |g, p| {
        let x = g.param(p, ParamId(0));
        let y = g.param(p, ParamId(1));
        let a = g.binary_cross_entropy(x, true)?;
        let b = g.binary_cross_entropy(y, false)?;
        g.add(a, b)
    })
    .unwrap();
    assert!(report.passes(OP_TOL), "{}", report.render());
}

#[test]
fn op_concat_slice_lookup() {
    let mut params: Params<f64> = Params::new();
    params.add(
        "table",
        Tensor::matrix(3, 2, vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4]),
    );
    vec_param(&mut params, "x", &[0.9, -0.6]);
    let report = grad_check(&mut params, DEFAULT_STEP, |g, p| {
        let table = g.param(p, ParamId(0));
        let x = g.param(p, ParamId(1));
        let r0 = g.lookup(table, 0)?;
        let r2 = g.lookup(table, 2)?;
        let r0b = g.lookup(table, 0)?; // repeated row: gradients accumulate
        let cat = g.concat(&[r0, x, r2, r0b])?;
        let tail = g.slice(cat, 3, 4)?;
        let t = g.tanh(tail)?;
        g.sum(t)
    })
    .unwrap();
    assert!(report.passes(OP_TOL), "{}", report.render());
}

#[test]
fn composite_two_layer_recurrence() {
    // A hand-rolled two-step GRU-like recurrence: matmuls, gates, state
    // blending, then a softmax loss. Exercises long chains with reuse.
    let mut params: Params<f64> = Params::new();
    params.add(
        "wz",
        Tensor::matrix(2, 4, vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4, 0.2, -0.3]),
    );
    params.add(
        "wh",
        Tensor::matrix(2, 4, vec![-0.1, 0.6, 0.2, -0.5, 0.4, 0.3, -0.2, 0.1]),
    );
    vec_param(&mut params, "x0", &[0.9, -0.6]);
    vec_param(&mut params, "x1", &[-0.2, 0.8]);
    let report = grad_check(&mut params, DEFAULT_STEP, |g, p| {
        let wz = g.param(p, ParamId(0));
        let wh = g.param(p, ParamId(1));
        let mut h = g.zeros_const(2);
        for x in [ParamId(2), ParamId(3)] {
            let x = g.param(p, x);
            let xh = g.concat(&[x, h])?;
            let z = g.matmul(wz, xh)?;
            let z = g.sigmoid(z)?;
            let c = g.matmul(wh, xh)?;
            let c = g.tanh(c)?;
            let keep = g.mul(z, h)?;
            let ones = g.ones_const(2);
            let inv = g.sub(ones, z)?;
            let take = g.mul(inv, c)?;
            h = g.add(keep, take)?;
        }
        g.cross_entropy(h, 1)
    })
    .unwrap();
    assert!(report.passes(OP_TOL), "{}", report.render());
}

fn check_model(kind: ModelKind) {
    let vocab_size = 20;
    let (schema, dialogues) = micro_fixture(vocab_size);
    let cfg = ModelConfig::small(vocab_size, 5, 8);
    let mut model: Model<f64> = Model::new(kind, cfg, 11).unwrap();
    // Check away from the init point: doubled weights push attention
    // softmaxes off uniform so weakly coupled parameters carry enough
    // gradient to rise above finite-difference noise.
    for (_, entry) in model.params_mut().iter_mut() {
        entry.value.scale_assign(2.0);
    }
    let report = grad_check_model(&mut model, &schema, &dialogues, DEFAULT_STEP).unwrap();
    assert!(
        report.passes(MODEL_TOL),
        "{kind} gradients disagree with finite differences:\n{}",
        report.render()
    );
}

#[test]
fn full_model_goal_conditioned_hierarchical() {
    check_model(ModelKind::Gduha);
}

#[test]
fn full_model_hierarchical_baseline() {
    check_model(ModelKind::Hred);
}

#[test]
fn full_model_flat_lm() {
    check_model(ModelKind::Lmg);
}
