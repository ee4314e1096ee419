//! The three dialogue models and their training loop.
//!
//! `gduha` is the goal-conditioned dual hierarchical model: one
//! encoder/context/decoder branch per speaker role, a goal embedding
//! initializing the context RNNs, and an end-of-dialogue classifier.
//! `hred` is the single-branch hierarchical baseline without goals.
//! `lmg` is a flat goal-conditioned language model over the token stream.

pub mod hierarchical;
pub mod lmg;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Goal, GoalSchema, Role};
use crate::graph::{Graph, Var};
use crate::layers::Ffn2;
use crate::params::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use hierarchical::Hierarchical;
pub use lmg::LmGoalModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gduha,
    Hred,
    Lmg,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gduha => "gduha",
            ModelKind::Hred => "hred",
            ModelKind::Lmg => "lmg",
        }
    }

    pub const ALL: [ModelKind; 3] = [ModelKind::Gduha, ModelKind::Hred, ModelKind::Lmg];
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gduha" => Ok(ModelKind::Gduha),
            "hred" => Ok(ModelKind::Hred),
            "lmg" => Ok(ModelKind::Lmg),
            other => Err(Error::Config(format!(
                "unknown model {other:?} (expected gduha, hred, or lmg)"
            ))),
        }
    }
}

/// Dimensions shared by all three models. Word-level RNNs and the context
/// RNNs all use `hidden_dim`; the flat language model uses `lm_layers`
/// while the hierarchical models use `gru_layers`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Width of the binary goal encoding; schema-dependent.
    pub goal_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub gru_layers: usize,
    pub lm_layers: usize,
    pub word_att_hidden: usize,
    pub ctx_att_hidden: usize,
    pub eod_hidden: usize,
    pub goal_ffn_hidden: usize,
    pub max_turns: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Reference configuration from the evaluation setup.
    pub fn reference(vocab_size: usize, goal_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            goal_dim,
            embed_dim: 200,
            hidden_dim: 200,
            gru_layers: 2,
            lm_layers: 3,
            word_att_hidden: 50,
            ctx_att_hidden: 100,
            eod_hidden: 50,
            goal_ffn_hidden: 200,
            max_turns: 22,
            max_seq_len: 36,
        }
    }

    /// Desk-scale configuration for tests and quick experiments.
    pub fn small(vocab_size: usize, goal_dim: usize, hidden: usize) -> Self {
        ModelConfig {
            vocab_size,
            goal_dim,
            embed_dim: hidden,
            hidden_dim: hidden,
            gru_layers: 2,
            lm_layers: 3,
            word_att_hidden: hidden / 2,
            ctx_att_hidden: hidden / 2,
            eod_hidden: hidden / 2,
            goal_ffn_hidden: hidden,
            max_turns: 22,
            max_seq_len: 36,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("goal_dim", self.goal_dim),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("gru_layers", self.gru_layers),
            ("lm_layers", self.lm_layers),
            ("word_att_hidden", self.word_att_hidden),
            ("ctx_att_hidden", self.ctx_att_hidden),
            ("eod_hidden", self.eod_hidden),
            ("goal_ffn_hidden", self.goal_ffn_hidden),
            ("max_turns", self.max_turns),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= crate::corpus::RESERVED.len() {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for content tokens",
                self.vocab_size
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }
}

/// Loss of one dialogue: summed token NLL plus summed end-of-dialogue BCE,
/// with handles into the graph for each component.
pub struct DialogueLoss {
    pub total: Var,
    pub nll_sum: Var,
    pub eod_sum: Var,
    /// Number of token predictions behind `nll_sum`.
    pub token_count: usize,
    /// Number of BCE terms behind `eod_sum` (zero for the flat LM).
    pub eod_count: usize,
    pub per_turn: Vec<TurnLoss>,
}

pub struct TurnLoss {
    pub role: Role,
    pub nll: Var,
    pub token_count: usize,
    /// End-of-dialogue logit after this turn; absent for the flat LM.
    pub eod_logit: Option<Var>,
}

/// Scheduled-sampling control for training passes: with probability `prob`
/// a turn's context input is the model's own greedy decode instead of the
/// reference utterance.
pub struct Sampler<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub prob: f64,
}

/// Sum of `ffn` applied to each goal's binary encoding. Goals are summed in
/// the canonical order of their encodings, so permuting the input list
/// cannot change even the floating-point rounding, and a repeated goal
/// contributes exactly twice.
pub(crate) fn goal_vector<S: Scalar>(
    g: &mut Graph<S>,
    params: &Params<S>,
    ffn: &Ffn2,
    schema: &GoalSchema,
    goals: &[Goal],
    goal_dim: usize,
) -> Result<Var> {
    if goals.is_empty() {
        return Err(Error::Generation("at least one goal is required".into()));
    }
    if schema.encoding_dim() != goal_dim {
        return Err(Error::Config(format!(
            "schema encodes {} dims but the model expects {}",
            schema.encoding_dim(),
            goal_dim
        )));
    }
    let mut encodings: Vec<Vec<u8>> = goals
        .iter()
        .map(|goal| schema.encode_goal(goal))
        .collect::<Result<_>>()?;
    encodings.sort();
    let mut total: Option<Var> = None;
    for bits in encodings {
        let data: Vec<S> = bits.iter().map(|&b| S::from_f64(f64::from(b))).collect();
        let x = g.constant(Tensor::vector(data));
        let e = ffn.forward(g, params, x)?;
        total = Some(match total {
            Some(t) => g.add(t, e)?,
            None => e,
        });
    }
    Ok(total.expect("non-empty goals"))
}

#[derive(Debug)]
pub enum Model<S> {
    Gduha(Hierarchical<S>),
    Hred(Hierarchical<S>),
    Lmg(LmGoalModel<S>),
}

impl<S: Scalar> Model<S> {
    pub fn new(kind: ModelKind, cfg: ModelConfig, seed: u64) -> Result<Model<S>> {
        cfg.validate()?;
        Ok(match kind {
            ModelKind::Gduha => Model::Gduha(Hierarchical::new(cfg, true, true, seed)),
            ModelKind::Hred => Model::Hred(Hierarchical::new(cfg, false, false, seed)),
            ModelKind::Lmg => Model::Lmg(LmGoalModel::new(cfg, seed)),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Gduha(_) => ModelKind::Gduha,
            Model::Hred(_) => ModelKind::Hred,
            Model::Lmg(_) => ModelKind::Lmg,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Gduha(m) | Model::Hred(m) => &m.cfg,
            Model::Lmg(m) => &m.cfg,
        }
    }

    pub fn params(&self) -> &Params<S> {
        match self {
            Model::Gduha(m) | Model::Hred(m) => &m.params,
            Model::Lmg(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Params<S> {
        match self {
            Model::Gduha(m) | Model::Hred(m) => &mut m.params,
            Model::Lmg(m) => &mut m.params,
        }
    }

    /// Total number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params().total_len()
    }

    /// Teacher-forced loss of one dialogue. `sampler` enables scheduled
    /// sampling of context inputs; the flat LM has no context inputs and
    /// ignores it.
    pub fn dialogue_loss(
        &self,
        g: &mut Graph<S>,
        schema: &GoalSchema,
        dialogue: &Dialogue,
        sampler: &mut Option<Sampler<'_>>,
    ) -> Result<DialogueLoss> {
        match self {
            Model::Gduha(m) | Model::Hred(m) => m.dialogue_loss(g, schema, dialogue, sampler),
            Model::Lmg(m) => m.dialogue_loss(g, schema, dialogue),
        }
    }

    /// Overwrites embedding rows that have a pretrained vector.
    pub fn apply_pretrained_embeddings(&mut self, vectors: &[Option<Vec<f32>>]) -> Result<()> {
        let (embed, dim) = match self {
            Model::Gduha(m) | Model::Hred(m) => (m.embed, m.cfg.embed_dim),
            Model::Lmg(m) => (m.embed, m.cfg.embed_dim),
        };
        if vectors.len() != self.config().vocab_size {
            return Err(Error::Config(format!(
                "expected {} embedding entries, got {}",
                self.config().vocab_size,
                vectors.len()
            )));
        }
        let table = self.params_mut().value_mut(embed);
        for (row, vec) in vectors.iter().enumerate() {
            if let Some(v) = vec {
                debug_assert_eq!(v.len(), dim);
                for (slot, &x) in table.row_mut(row).iter_mut().zip(v) {
                    *slot = S::from_f64(x as f64);
                }
            }
        }
        Ok(())
    }
}
