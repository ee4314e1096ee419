//! Hierarchical attentional encoder-decoder over dialogue turns.
//!
//! One instance covers both hierarchical models: with `per_role` branches
//! and goal conditioning it is the dual goal-embedded model; with a single
//! shared branch and no goals it is the plain hierarchical baseline.
//!
//! Per turn, a word-level GRU encodes the utterance, word attention (queried
//! by the first-layer context state) pools the encoder states, a context GRU
//! consumes the pooled vector, and a skip connection adds that input back to
//! the context output to form the turn context `c_t`. Attention over all
//! previous turn contexts (from every branch) yields a global vector, and
//! `[global; c_t]` is the final context that conditions the next turn's
//! decoder and the end-of-dialogue classifier. Decoding turn `m` therefore
//! uses the final context produced after turn `m - 1`; the first turn is
//! conditioned on `[0; c_0]` where `c_0` is the initial context state (the
//! goal embedding, or zero without goals).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dialogue, Goal, GoalSchema, Role, TokenId, BOS, EOS, EOU_AGENT, EOU_USER, PAD};
use crate::graph::{Graph, Var};
use crate::layers::{AdditiveAttention, Ffn2, GruStack, Linear};
use crate::params::{ParamId, Params};
use crate::scalar::Scalar;
use crate::tensor::Shape;
use crate::{Error, Result};

use super::{DialogueLoss, ModelConfig, Sampler, TurnLoss};

#[derive(Debug)]
struct Branch {
    enc: GruStack,
    word_att: AdditiveAttention,
    ctx: GruStack,
    dec: GruStack,
    /// Projection of the final context to the decoder's initial state,
    /// applied as `tanh(P c)`.
    dec_init: ParamId,
}

#[derive(Debug)]
pub struct Hierarchical<S> {
    pub cfg: ModelConfig,
    pub params: Params<S>,
    pub embed: ParamId,
    goal_ffn: Option<Ffn2>,
    branches: Vec<Branch>,
    ctx_att: AdditiveAttention,
    eod: Ffn2,
    out: Linear,
    per_role: bool,
}

/// Mutable cursor of a dialogue walk: per-branch context states, the turn
/// contexts seen so far, and the final context conditioning the next turn.
pub(crate) struct WalkState {
    ctx: Vec<Vec<Var>>,
    history: Vec<Var>,
    pub(crate) prev_final: Var,
}

pub(crate) fn argmax_excluding<S: Scalar>(logits: &[S], excluded: &[TokenId]) -> TokenId {
    let mut best: Option<usize> = None;
    for (i, &v) in logits.iter().enumerate() {
        if excluded.contains(&(i as TokenId)) {
            continue;
        }
        match best {
            Some(b) if logits[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best.expect("logits cover more than the excluded ids") as TokenId
}

/// Ids a word decoder may never emit: padding, the start marker, and the
/// flat-LM boundary markers.
pub(crate) const DECODER_EXCLUDED: [TokenId; 4] = [PAD, BOS, EOU_USER, EOU_AGENT];

impl<S: Scalar> Hierarchical<S> {
    pub fn new(cfg: ModelConfig, per_role: bool, use_goals: bool, seed: u64) -> Self {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden_dim;
        let embed = params.add_uniform(
            "embed",
            Shape::matrix(cfg.vocab_size, cfg.embed_dim),
            cfg.embed_dim,
            &mut rng,
        );
        let goal_ffn = use_goals.then(|| {
            Ffn2::register(
                &mut params,
                &mut rng,
                "goal_ffn",
                cfg.goal_dim,
                cfg.goal_ffn_hidden,
                h,
            )
        });
        let prefixes: &[&str] = if per_role { &["user", "agent"] } else { &["shared"] };
        let branches = prefixes
            .iter()
            .map(|p| Branch {
                enc: GruStack::register(
                    &mut params,
                    &mut rng,
                    &format!("{p}.enc"),
                    cfg.embed_dim,
                    h,
                    cfg.gru_layers,
                ),
                word_att: AdditiveAttention::register(
                    &mut params,
                    &mut rng,
                    &format!("{p}.word_att"),
                    h,
                    h,
                    cfg.word_att_hidden,
                ),
                ctx: GruStack::register(
                    &mut params,
                    &mut rng,
                    &format!("{p}.ctx"),
                    h,
                    h,
                    cfg.gru_layers,
                ),
                dec: GruStack::register(
                    &mut params,
                    &mut rng,
                    &format!("{p}.dec"),
                    cfg.embed_dim,
                    h,
                    cfg.gru_layers,
                ),
                dec_init: params.add_uniform(
                    format!("{p}.dec_init"),
                    Shape::matrix(h, 2 * h),
                    2 * h,
                    &mut rng,
                ),
            })
            .collect();
        let ctx_att =
            AdditiveAttention::register(&mut params, &mut rng, "ctx_att", h, h, cfg.ctx_att_hidden);
        let eod = Ffn2::register(&mut params, &mut rng, "eod", 2 * h, cfg.eod_hidden, 1);
        let out = Linear::register(&mut params, &mut rng, "out", h, cfg.vocab_size);
        Hierarchical {
            cfg,
            params,
            embed,
            goal_ffn,
            branches,
            ctx_att,
            eod,
            out,
            per_role,
        }
    }

    pub fn uses_goals(&self) -> bool {
        self.goal_ffn.is_some()
    }

    fn branch(&self, role: Role) -> &Branch {
        if self.per_role {
            &self.branches[role.index()]
        } else {
            &self.branches[0]
        }
    }

    fn branch_index(&self, role: Role) -> usize {
        if self.per_role {
            role.index()
        } else {
            0
        }
    }

    /// Goal vector: the summed goal FFN outputs (see
    /// [`super::goal_vector`]).
    pub fn embed_goals(
        &self,
        g: &mut Graph<S>,
        schema: &GoalSchema,
        goals: &[Goal],
    ) -> Result<Var> {
        let ffn = self
            .goal_ffn
            .as_ref()
            .expect("embed_goals on a model without goal conditioning");
        super::goal_vector(g, &self.params, ffn, schema, goals, self.cfg.goal_dim)
    }

    /// Initial walk state: context RNN layers start from the goal embedding
    /// (or zero), and the first turn is conditioned on `[0; c_0]`.
    pub(crate) fn init_state(
        &self,
        g: &mut Graph<S>,
        schema: &GoalSchema,
        goals: &[Goal],
    ) -> Result<WalkState> {
        let h = self.cfg.hidden_dim;
        let c0 = if self.goal_ffn.is_some() {
            self.embed_goals(g, schema, goals)?
        } else {
            g.zeros_const(h)
        };
        let ctx = self
            .branches
            .iter()
            .map(|b| b.ctx.broadcast_state(c0))
            .collect();
        let zero_global = g.zeros_const(h);
        let prev_final = g.concat(&[zero_global, c0])?;
        Ok(WalkState {
            ctx,
            history: Vec::new(),
            prev_final,
        })
    }

    /// Feeds one utterance through its branch: encode, pool with word
    /// attention, advance the context RNN, and rebuild the final context.
    pub(crate) fn consume_turn(
        &self,
        g: &mut Graph<S>,
        st: &mut WalkState,
        role: Role,
        tokens: &[TokenId],
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Generation("cannot encode an empty utterance".into()));
        }
        let b = self.branch(role);
        let bi = self.branch_index(role);
        let embed = g.param(&self.params, self.embed);

        let mut enc_state = b.enc.zero_state(g);
        let mut enc_tops = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let x = g.lookup(embed, tok as usize)?;
            enc_state = b.enc.step(g, &self.params, x, &enc_state)?;
            enc_tops.push(*enc_state.last().expect("at least one layer"));
        }

        let query = st.ctx[bi][0];
        let (utt, _) = b
            .word_att
            .attend(g, &self.params, query, &enc_tops, &enc_tops)?;

        let new_ctx = b.ctx.step(g, &self.params, utt, &st.ctx[bi])?;
        let raw_top = *new_ctx.last().expect("at least one layer");
        let c_t = g.add(raw_top, utt)?;

        let global = if st.history.is_empty() {
            g.zeros_const(self.cfg.hidden_dim)
        } else {
            let (global, _) =
                self.ctx_att
                    .attend(g, &self.params, c_t, &st.history, &st.history)?;
            global
        };
        let final_ctx = g.concat(&[global, c_t])?;

        st.ctx[bi] = new_ctx;
        st.history.push(c_t);
        st.prev_final = final_ctx;
        Ok(final_ctx)
    }

    fn decoder_init(&self, g: &mut Graph<S>, role: Role, cond: Var) -> Result<Vec<Var>> {
        let b = self.branch(role);
        let p = g.param(&self.params, b.dec_init);
        let proj = g.matmul(p, cond)?;
        let init = g.tanh(proj)?;
        Ok(b.dec.broadcast_state(init))
    }

    /// Teacher-forced negative log-likelihood of `tokens` decoded from
    /// `cond` by `role`'s decoder.
    pub(crate) fn decode_nll(
        &self,
        g: &mut Graph<S>,
        role: Role,
        cond: Var,
        tokens: &[TokenId],
    ) -> Result<(Var, usize)> {
        if tokens.is_empty() {
            return Err(Error::Generation("cannot score an empty utterance".into()));
        }
        let b = self.branch(role);
        let embed = g.param(&self.params, self.embed);
        let mut state = self.decoder_init(g, role, cond)?;
        let mut prev = BOS;
        let mut nll: Option<Var> = None;
        for &target in tokens {
            let x = g.lookup(embed, prev as usize)?;
            state = b.dec.step(g, &self.params, x, &state)?;
            let logits = self
                .out
                .forward(g, &self.params, *state.last().expect("layer"))?;
            let ce = g.cross_entropy(logits, target as usize)?;
            nll = Some(match nll {
                Some(acc) => g.add(acc, ce)?,
                None => ce,
            });
            prev = target;
        }
        Ok((nll.expect("non-empty tokens"), tokens.len()))
    }

    /// Greedy decode from `cond`; stops at `<eos>` or the length cap.
    pub(crate) fn greedy_decode(
        &self,
        g: &mut Graph<S>,
        role: Role,
        cond: Var,
    ) -> Result<Vec<TokenId>> {
        let b = self.branch(role);
        let embed = g.param(&self.params, self.embed);
        let mut state = self.decoder_init(g, role, cond)?;
        let mut prev = BOS;
        let mut tokens = Vec::new();
        for _ in 0..self.cfg.max_seq_len {
            let x = g.lookup(embed, prev as usize)?;
            state = b.dec.step(g, &self.params, x, &state)?;
            let logits = self
                .out
                .forward(g, &self.params, *state.last().expect("layer"))?;
            let tok = argmax_excluding(g.value(logits).data(), &DECODER_EXCLUDED);
            tokens.push(tok);
            if tok == EOS {
                break;
            }
            prev = tok;
        }
        Ok(tokens)
    }

    /// End-of-dialogue logit for a final context.
    pub(crate) fn eod_logit(&self, g: &mut Graph<S>, final_ctx: Var) -> Result<Var> {
        self.eod.forward(g, &self.params, final_ctx)
    }

    pub fn dialogue_loss(
        &self,
        g: &mut Graph<S>,
        schema: &GoalSchema,
        dialogue: &Dialogue,
        sampler: &mut Option<Sampler<'_>>,
    ) -> Result<DialogueLoss> {
        if dialogue.turns.is_empty() {
            return Err(Error::Dialogue {
                id: dialogue.id.clone(),
                msg: "no turns".into(),
            });
        }
        let mut st = self.init_state(g, schema, &dialogue.goals)?;
        let last = dialogue.turns.len() - 1;
        let mut per_turn = Vec::with_capacity(dialogue.turns.len());
        let mut nll_sum: Option<Var> = None;
        let mut eod_sum: Option<Var> = None;
        let mut token_count = 0;

        for (m, turn) in dialogue.turns.iter().enumerate() {
            let cond = st.prev_final;
            let (nll, count) = self.decode_nll(g, turn.role, cond, &turn.tokens)?;
            token_count += count;

            let sample = match sampler {
                Some(s) => s.rng.random_bool(s.prob),
                None => false,
            };
            let sampled;
            let ctx_tokens: &[TokenId] = if sample {
                sampled = self.greedy_decode(g, turn.role, cond)?;
                &sampled
            } else {
                &turn.tokens
            };
            let final_ctx = self.consume_turn(g, &mut st, turn.role, ctx_tokens)?;

            let logit = self.eod_logit(g, final_ctx)?;
            let eod = g.binary_cross_entropy(logit, m == last)?;

            nll_sum = Some(match nll_sum {
                Some(acc) => g.add(acc, nll)?,
                None => nll,
            });
            eod_sum = Some(match eod_sum {
                Some(acc) => g.add(acc, eod)?,
                None => eod,
            });
            per_turn.push(TurnLoss {
                role: turn.role,
                nll,
                token_count: count,
                eod_logit: Some(logit),
            });
        }

        let nll_sum = nll_sum.expect("non-empty dialogue");
        let eod_sum = eod_sum.expect("non-empty dialogue");
        let total = g.add(nll_sum, eod_sum)?;
        Ok(DialogueLoss {
            total,
            nll_sum,
            eod_sum,
            token_count,
            eod_count: dialogue.turns.len(),
            per_turn,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;

    fn schema() -> GoalSchema {
        GoalSchema {
            domains: vec!["a".into(), "b".into()],
            user_slots: vec!["s1".into()],
            request_slots: vec!["r1".into()],
        }
    }

    fn goal(domain: &str) -> Goal {
        Goal {
            domain: domain.into(),
            user_slots: vec![],
            request_slots: vec![],
            book: false,
        }
    }

    fn tiny() -> Hierarchical<f64> {
        // goal_dim = 2 + 1 + 1 + 1 = 5.
        Hierarchical::new(ModelConfig::small(12, 5, 6), true, true, 3)
    }

    fn dialogue(turns: usize) -> Dialogue {
        let turns = (0..turns)
            .map(|i| Utterance {
                role: if i % 2 == 0 { Role::User } else { Role::Agent },
                tokens: vec![6 + (i as TokenId) % 3, 7, EOS],
            })
            .collect();
        Dialogue {
            id: "t".into(),
            goals: vec![goal("a")],
            turns,
        }
    }

    #[test]
    fn zero_model_loss_is_uniform_nll_plus_coin_bce() {
        // All-zero parameters give uniform vocabulary logits and a zero EOD
        // logit, so each token costs ln(vocab) and each turn ln(2).
        let mut m = tiny();
        for i in 0..m.params.len() {
            m.params.value_mut(ParamId(i)).fill(0.0);
        }
        let d = dialogue(4);
        let mut g: Graph<f64> = Graph::new();
        let loss = m.dialogue_loss(&mut g, &schema(), &d, &mut None).unwrap();
        let tokens = 12.0; // 4 turns x 3 tokens
        let expect = tokens * (12.0f64).ln() + 4.0 * (2.0f64).ln();
        assert!((g.value(loss.total).item() - expect).abs() < 1e-9);
        assert_eq!(loss.token_count, 12);
        assert_eq!(loss.eod_count, 4);
    }

    #[test]
    fn goal_embedding_is_additive_and_order_free() {
        let m = tiny();
        let s = schema();
        let ga = goal("a");
        let gb = goal("b");
        let mut g: Graph<f64> = Graph::new();
        let one = m.embed_goals(&mut g, &s, &[ga.clone()]).unwrap();
        let two = m.embed_goals(&mut g, &s, &[ga.clone(), ga.clone()]).unwrap();
        let fwd = m.embed_goals(&mut g, &s, &[ga.clone(), gb.clone()]).unwrap();
        let rev = m.embed_goals(&mut g, &s, &[gb, ga]).unwrap();
        let doubled: Vec<f64> = g.value(one).data().iter().map(|x| 2.0 * x).collect();
        assert_eq!(g.value(two).data(), &doubled[..]);
        assert_eq!(g.value(fwd).data(), g.value(rev).data());
    }

    #[test]
    fn branch_gradients_stay_in_their_role() {
        // The agent decoder never scores a user turn, so a dialogue's user-
        // turn NLL leaves every agent decoder gradient at exactly zero.
        let m = tiny();
        let d = dialogue(2);
        let mut g: Graph<f64> = Graph::new();
        let mut params_copy = clone_params(&m.params);
        let loss = m.dialogue_loss(&mut g, &schema(), &d, &mut None).unwrap();
        let user_turn_nll = loss.per_turn[0].nll;
        g.backward(user_turn_nll, &mut params_copy).unwrap();
        for (_, e) in params_copy.iter() {
            if e.name.starts_with("agent.dec") || e.name.starts_with("agent.enc") {
                assert!(
                    e.grad.data().iter().all(|&x| x == 0.0),
                    "{} received gradient from a user turn",
                    e.name
                );
            }
        }
    }

    fn clone_params(p: &Params<f64>) -> Params<f64> {
        let mut out = Params::new();
        for (_, e) in p.iter() {
            out.add(e.name.clone(), e.value.clone());
        }
        out
    }

    #[test]
    fn greedy_decode_respects_caps_and_exclusions() {
        let m = tiny();
        let s = schema();
        let mut g: Graph<f64> = Graph::new();
        let mut st = m.init_state(&mut g, &s, &[goal("a")]).unwrap();
        m.consume_turn(&mut g, &mut st, Role::User, &[6, EOS]).unwrap();
        let tokens = m.greedy_decode(&mut g, Role::Agent, st.prev_final).unwrap();
        assert!(!tokens.is_empty());
        assert!(tokens.len() <= m.cfg.max_seq_len);
        for &t in &tokens {
            assert!(!DECODER_EXCLUDED.contains(&t));
        }
        if tokens.len() < m.cfg.max_seq_len {
            assert_eq!(*tokens.last().unwrap(), EOS);
        }
    }

    #[test]
    fn argmax_excluding_skips_and_ties_low() {
        let logits = [9.0f64, 2.0, 3.0, 3.0];
        assert_eq!(argmax_excluding(&logits, &[0]), 2);
        assert_eq!(argmax_excluding(&logits, &[]), 0);
    }
}
