//! Central-difference verification of the analytic gradients.
//!
//! The builder closure reconstructs the loss from scratch on every call so
//! the finite-difference probes see the perturbed parameter values. Probes
//! only need the forward value; the single analytic sweep uses `backward`.
//!
//! Errors are judged per parameter entry (one named tensor) by comparing
//! gradient norms: `||a − n|| / max(1e-8, ||a|| + ||n||)`. Individual
//! elements with near-zero true gradients sit below the resolution of a
//! finite difference against a multi-term loss (the quotient's noise floor
//! is ulp(loss)/2h), so an element-wise quotient would be dominated by
//! rounding noise rather than gradient bugs; the norm ratio still catches
//! any real defect, which perturbs whole tensors, not lone elements.

use crate::corpus::{Dialogue, Goal, GoalSchema, Role, Utterance, EOS, RESERVED};
use crate::graph::{Graph, Var};
use crate::models::Model;
use crate::params::{ParamId, Params};
use crate::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error per parameter entry, in registration order.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub worst: f64,
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// Norm relative error over the whole entry.
    pub rel_err: f64,
    /// Flat index of the element with the largest |analytic − numeric|,
    /// with its two values; diagnostic only.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst < tolerance
    }

    /// One line per parameter, worst first.
    pub fn render(&self) -> String {
        let mut rows: Vec<&ParamCheck> = self.per_param.iter().collect();
        rows.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
        let mut out = String::new();
        for r in rows {
            out.push_str(&format!(
                "{:<28} rel_err {:>12.3e}  (worst element {}: analytic {:>13.6e}, numeric {:>13.6e})\n",
                r.name, r.rel_err, r.worst_index, r.analytic, r.numeric
            ));
        }
        out.push_str(&format!("worst relative error: {:.3e}\n", self.worst));
        out
    }
}

/// Accumulates one entry's element comparisons into a norm ratio.
struct EntryAcc {
    name: String,
    diff2: f64,
    a2: f64,
    n2: f64,
    worst_diff: f64,
    worst_index: usize,
    worst_a: f64,
    worst_n: f64,
}

impl EntryAcc {
    fn new(name: String) -> Self {
        EntryAcc {
            name,
            diff2: 0.0,
            a2: 0.0,
            n2: 0.0,
            worst_diff: -1.0,
            worst_index: 0,
            worst_a: 0.0,
            worst_n: 0.0,
        }
    }

    fn push(&mut self, index: usize, analytic: f64, numeric: f64) {
        let diff = (analytic - numeric).abs();
        self.diff2 += diff * diff;
        self.a2 += analytic * analytic;
        self.n2 += numeric * numeric;
        if diff > self.worst_diff {
            self.worst_diff = diff;
            self.worst_index = index;
            self.worst_a = analytic;
            self.worst_n = numeric;
        }
    }

    fn finish(self) -> ParamCheck {
        ParamCheck {
            name: self.name,
            rel_err: norm_rel_err(self.diff2.sqrt(), self.a2.sqrt(), self.n2.sqrt()),
            worst_index: self.worst_index,
            analytic: self.worst_a,
            numeric: self.worst_n,
        }
    }
}

fn norm_rel_err(diff: f64, a: f64, n: f64) -> f64 {
    diff / f64::max(1e-8, a + n)
}

fn assemble(checks: Vec<ParamCheck>) -> GradCheckReport {
    let worst = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    GradCheckReport {
        per_param: checks,
        worst,
    }
}

/// Compares analytic gradients of `build`'s loss against central differences
/// with step `h`, probing every element of every parameter.
pub fn grad_check<F>(params: &mut Params<f64>, h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Params<f64>) -> Result<Var>,
{
    let eval = |params: &Params<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, params)?;
        Ok(g.value(loss).item())
    };

    params.zero_grads();
    let mut g = Graph::new();
    g.verify = true;
    let loss = build(&mut g, params)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::GradCheck("loss is not finite".into()));
    }
    g.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, e)| e.grad.data().to_vec())
        .collect();

    let mut checks = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let id = ParamId(pi);
        let mut acc = EntryAcc::new(params.entry(id).name.clone());
        for j in 0..params.value(id).len() {
            let saved = params.value(id).at(j);
            params.value_mut(id).data_mut()[j] = saved + h;
            let up = eval(params)?;
            params.value_mut(id).data_mut()[j] = saved - h;
            let down = eval(params)?;
            params.value_mut(id).data_mut()[j] = saved;
            acc.push(j, analytic[pi][j], (up - down) / (2.0 * h));
        }
        checks.push(acc.finish());
    }
    Ok(assemble(checks))
}

/// Checks a whole model's gradients on the teacher-forced loss summed over
/// `dialogues`. Same probe scheme as [`grad_check`]; the analytic pass
/// accumulates over one backward sweep per dialogue.
pub fn grad_check_model(
    model: &mut Model<f64>,
    schema: &GoalSchema,
    dialogues: &[Dialogue],
    h: f64,
) -> Result<GradCheckReport> {
    if dialogues.is_empty() {
        return Err(Error::GradCheck("no dialogues to check against".into()));
    }
    let eval = |m: &Model<f64>| -> Result<f64> {
        let mut total = 0.0;
        for d in dialogues {
            let mut g: Graph<f64> = Graph::new();
            let loss = m.dialogue_loss(&mut g, schema, d, &mut None)?;
            total += g.value(loss.total).item();
        }
        Ok(total)
    };

    model.params_mut().zero_grads();
    for d in dialogues {
        let mut g: Graph<f64> = Graph::new();
        g.verify = true;
        let loss = model.dialogue_loss(&mut g, schema, d, &mut None)?;
        if !g.value(loss.total).item().is_finite() {
            return Err(Error::GradCheck("loss is not finite".into()));
        }
        g.backward(loss.total, model.params_mut())?;
    }
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|(_, e)| e.grad.data().to_vec())
        .collect();

    let mut checks = Vec::with_capacity(model.params().len());
    for pi in 0..model.params().len() {
        let id = ParamId(pi);
        let mut acc = EntryAcc::new(model.params().entry(id).name.clone());
        for j in 0..model.params().value(id).len() {
            let saved = model.params().value(id).at(j);
            model.params_mut().value_mut(id).data_mut()[j] = saved + h;
            let up = eval(model)?;
            model.params_mut().value_mut(id).data_mut()[j] = saved - h;
            let down = eval(model)?;
            model.params_mut().value_mut(id).data_mut()[j] = saved;
            acc.push(j, analytic[pi][j], (up - down) / (2.0 * h));
        }
        checks.push(acc.finish());
    }
    Ok(assemble(checks))
}

/// Two short dialogues dense enough to light up every parameter: both
/// roles speak twice, one dialogue carries two goals, both end-of-dialogue
/// labels occur. Token ids cycle through the content range of
/// `vocab_size`.
pub fn micro_fixture(vocab_size: usize) -> (GoalSchema, Vec<Dialogue>) {
    assert!(vocab_size > RESERVED.len() + 1, "vocab too small");
    let schema = GoalSchema {
        domains: vec!["alpha".into(), "beta".into()],
        user_slots: vec!["area".into()],
        request_slots: vec!["phone".into()],
    };
    let content = (vocab_size - RESERVED.len()) as u32;
    let tok = |k: u32| RESERVED.len() as u32 + (k * 5 + 1) % content;
    let turn = |role: Role, ks: &[u32]| Utterance {
        role,
        tokens: ks.iter().map(|&k| tok(k)).chain([EOS]).collect(),
    };
    let goal = |domain: &str, with_slots: bool, book: bool| Goal {
        domain: domain.into(),
        user_slots: if with_slots { vec!["area".into()] } else { vec![] },
        request_slots: if with_slots { vec!["phone".into()] } else { vec![] },
        book,
    };
    let dialogues = vec![
        Dialogue {
            id: "check-0".into(),
            goals: vec![goal("alpha", true, true)],
            turns: vec![
                turn(Role::User, &[0, 1, 2]),
                turn(Role::Agent, &[3, 4]),
                turn(Role::User, &[5]),
                turn(Role::Agent, &[6, 7, 0]),
            ],
        },
        Dialogue {
            id: "check-1".into(),
            goals: vec![goal("beta", false, false), goal("alpha", true, false)],
            turns: vec![
                turn(Role::User, &[8, 9]),
                turn(Role::Agent, &[10, 11, 12]),
                turn(Role::User, &[13, 1]),
                turn(Role::Agent, &[2]),
            ],
        },
    ];
    (schema, dialogues)
}
