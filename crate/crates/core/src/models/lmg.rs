//! Goal-conditioned language model over the flattened dialogue stream.
//!
//! A dialogue becomes `<bos> t.. <eou_user> t.. <eou_agent> ... <eos>`:
//! each turn's content tokens followed by its role's boundary marker, with
//! `<eos>` closing the whole dialogue. A stacked GRU predicts the next
//! stream token; every layer's initial state is the goal vector. There is
//! no end-of-dialogue classifier: emitting `<eos>` is the termination.

use rand_chacha::ChaCha8Rng;

use rand::SeedableRng;

use crate::corpus::{Dialogue, GoalSchema, TokenId, BOS, EOS};
use crate::graph::{Graph, Var};
use crate::layers::{Ffn2, GruStack, Linear};
use crate::params::{ParamId, Params};
use crate::scalar::Scalar;
use crate::tensor::Shape;
use crate::{Error, Result};

use super::{goal_vector, DialogueLoss, ModelConfig};

#[derive(Debug)]
pub struct LmGoalModel<S> {
    pub cfg: ModelConfig,
    pub params: Params<S>,
    pub embed: ParamId,
    goal_ffn: Ffn2,
    gru: GruStack,
    out: Linear,
}

/// Flattens a dialogue into the token stream the model is trained on.
pub fn dialogue_stream(dialogue: &Dialogue) -> Vec<TokenId> {
    let mut stream = vec![BOS];
    for turn in &dialogue.turns {
        stream.extend_from_slice(turn.content_tokens());
        stream.push(turn.role.eou_token());
    }
    stream.push(EOS);
    stream
}

impl<S: Scalar> LmGoalModel<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = params.add_uniform(
            "embed",
            Shape::matrix(cfg.vocab_size, cfg.embed_dim),
            cfg.embed_dim,
            &mut rng,
        );
        let goal_ffn = Ffn2::register(
            &mut params,
            &mut rng,
            "goal_ffn",
            cfg.goal_dim,
            cfg.goal_ffn_hidden,
            cfg.hidden_dim,
        );
        let gru = GruStack::register(
            &mut params,
            &mut rng,
            "lm",
            cfg.embed_dim,
            cfg.hidden_dim,
            cfg.lm_layers,
        );
        let out = Linear::register(&mut params, &mut rng, "out", cfg.hidden_dim, cfg.vocab_size);
        LmGoalModel {
            cfg,
            params,
            embed,
            goal_ffn,
            gru,
            out,
        }
    }

    /// Initial per-layer states: the goal vector everywhere.
    pub(crate) fn initial_state(
        &self,
        g: &mut Graph<S>,
        schema: &GoalSchema,
        goals: &[crate::corpus::Goal],
    ) -> Result<Vec<Var>> {
        let gv = goal_vector(
            g,
            &self.params,
            &self.goal_ffn,
            schema,
            goals,
            self.cfg.goal_dim,
        )?;
        Ok(self.gru.broadcast_state(gv))
    }

    /// Consumes one token; returns the new state and next-token logits.
    pub(crate) fn step(
        &self,
        g: &mut Graph<S>,
        state: &[Var],
        token: TokenId,
    ) -> Result<(Vec<Var>, Var)> {
        let embed = g.param(&self.params, self.embed);
        let x = g.lookup(embed, token as usize)?;
        let new_state = self.gru.step(g, &self.params, x, state)?;
        let logits = self
            .out
            .forward(g, &self.params, *new_state.last().expect("layer"))?;
        Ok((new_state, logits))
    }

    pub fn dialogue_loss(
        &self,
        g: &mut Graph<S>,
        schema: &GoalSchema,
        dialogue: &Dialogue,
    ) -> Result<DialogueLoss> {
        if dialogue.turns.is_empty() {
            return Err(Error::Dialogue {
                id: dialogue.id.clone(),
                msg: "no turns".into(),
            });
        }
        let stream = dialogue_stream(dialogue);
        let mut state = self.initial_state(g, schema, &dialogue.goals)?;
        let mut nll: Option<Var> = None;
        for i in 0..stream.len() - 1 {
            let (new_state, logits) = self.step(g, &state, stream[i])?;
            state = new_state;
            let ce = g.cross_entropy(logits, stream[i + 1] as usize)?;
            nll = Some(match nll {
                Some(acc) => g.add(acc, ce)?,
                None => ce,
            });
        }
        let nll_sum = nll.expect("stream has at least two tokens");
        let eod_sum = g.scalar_const(S::zero());
        let total = g.add(nll_sum, eod_sum)?;
        Ok(DialogueLoss {
            total,
            nll_sum,
            eod_sum,
            token_count: stream.len() - 1,
            eod_count: 0,
            per_turn: Vec::new(),
        })
    }
}
