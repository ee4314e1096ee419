//! Greedy dialogue and response generation.
//!
//! Hierarchical models alternate roles from a user seed turn and stop when
//! the end-of-dialogue classifier fires (probability above 0.5, i.e. a
//! positive logit) or the turn cap is reached. The flat LM emits a token
//! stream and stops at `<eos>`; its role boundary markers are believed as
//! labeled, and a marker that breaks alternation is counted as a role
//! confusion rather than repaired.

use serde::{Deserialize, Serialize};

use crate::corpus::{
    Goal, GoalSchema, Role, TokenId, Utterance, BOS, EOS, EOU_AGENT, EOU_USER, PAD,
};
use crate::graph::Graph;
use crate::models::hierarchical::{argmax_excluding, Hierarchical};
use crate::models::{LmGoalModel, Model};
use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    /// The model decided the dialogue is complete.
    Eod,
    /// The turn (or token budget) cap cut generation off.
    TurnCap,
}

#[derive(Clone, Debug)]
pub struct GenerationRequest {
    pub id: String,
    pub goals: Vec<Goal>,
    /// Opening user turn the dialogue is rolled out from.
    pub seed: Utterance,
}

impl GenerationRequest {
    pub fn new(id: impl Into<String>, goals: Vec<Goal>, seed: Utterance) -> Result<Self> {
        if seed.role != Role::User {
            return Err(Error::Generation("seed turn must be a user turn".into()));
        }
        if seed.tokens.is_empty() {
            return Err(Error::Generation("seed turn is empty".into()));
        }
        Ok(GenerationRequest {
            id: id.into(),
            goals,
            seed,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedDialogue {
    pub id: String,
    pub goals: Vec<Goal>,
    /// Seed turn first, generated turns after it.
    pub turns: Vec<Utterance>,
    pub termination_reason: TerminationReason,
    /// Boundary markers that broke role alternation (flat LM only).
    pub role_confusions: usize,
}

fn seed_with_eos(seed: &Utterance, max_seq_len: usize) -> Utterance {
    let mut tokens = seed.tokens.clone();
    if tokens.len() > max_seq_len {
        tokens.truncate(max_seq_len - 1);
    }
    if *tokens.last().expect("non-empty seed") != EOS && tokens.len() < max_seq_len {
        tokens.push(EOS);
    }
    Utterance {
        role: Role::User,
        tokens,
    }
}

fn generate_hierarchical<S: Scalar>(
    m: &Hierarchical<S>,
    schema: &GoalSchema,
    req: &GenerationRequest,
) -> Result<GeneratedDialogue> {
    let mut g: Graph<S> = Graph::new();
    let mut st = m.init_state(&mut g, schema, &req.goals)?;
    let seed = seed_with_eos(&req.seed, m.cfg.max_seq_len);
    m.consume_turn(&mut g, &mut st, Role::User, &seed.tokens)?;

    let mut turns = vec![seed];
    let mut role = Role::Agent;
    let mut reason = TerminationReason::TurnCap;
    while turns.len() < m.cfg.max_turns {
        let tokens = m.greedy_decode(&mut g, role, st.prev_final)?;
        let final_ctx = m.consume_turn(&mut g, &mut st, role, &tokens)?;
        turns.push(Utterance { role, tokens });
        let logit = m.eod_logit(&mut g, final_ctx)?;
        if g.value(logit).item() > S::zero() {
            reason = TerminationReason::Eod;
            break;
        }
        role = role.other();
    }
    Ok(GeneratedDialogue {
        id: req.id.clone(),
        goals: req.goals.clone(),
        turns,
        termination_reason: reason,
        role_confusions: 0,
    })
}

fn generate_lm<S: Scalar>(
    m: &LmGoalModel<S>,
    schema: &GoalSchema,
    req: &GenerationRequest,
) -> Result<GeneratedDialogue> {
    let mut g: Graph<S> = Graph::new();
    let mut state = m.initial_state(&mut g, schema, &req.goals)?;
    let seed = seed_with_eos(&req.seed, m.cfg.max_seq_len);

    let mut prefix = vec![BOS];
    prefix.extend_from_slice(seed.content_tokens());
    prefix.push(EOU_USER);
    let mut logits = None;
    for &tok in &prefix {
        let (next, l) = m.step(&mut g, &state, tok)?;
        state = next;
        logits = Some(l);
    }

    let mut turns = vec![seed];
    let mut buffer: Vec<TokenId> = Vec::new();
    let mut confusions = 0;
    let mut reason = TerminationReason::TurnCap;
    let budget = m.cfg.max_turns * m.cfg.max_seq_len + 2;
    let mut emitted = prefix.len();

    while emitted < budget {
        let l = logits.expect("prefix is non-empty");
        // The stream is trusted as emitted: an immediate <eos> yields a
        // seed-only dialogue.
        let tok = argmax_excluding(g.value(l).data(), &[PAD, BOS]);
        emitted += 1;
        if tok == EOS {
            reason = TerminationReason::Eod;
            break;
        }
        let expected = turns.last().expect("seed present").role.other();
        let mut boundary = None;
        if tok == EOU_USER || tok == EOU_AGENT {
            boundary = Some(tok);
        } else {
            buffer.push(tok);
        }
        let (next, l) = m.step(&mut g, &state, tok)?;
        state = next;
        logits = Some(l);
        if boundary.is_none() && buffer.len() == m.cfg.max_seq_len - 1 {
            // Content at the length cap: close the turn the model failed
            // to, and let it see the marker it owed us.
            let marker = expected.eou_token();
            let (next, l) = m.step(&mut g, &state, marker)?;
            state = next;
            logits = Some(l);
            emitted += 1;
            boundary = Some(marker);
        }
        if let Some(marker) = boundary {
            let role = if marker == EOU_USER { Role::User } else { Role::Agent };
            if role != expected {
                confusions += 1;
            }
            let mut content = std::mem::take(&mut buffer);
            content.push(EOS);
            turns.push(Utterance {
                role,
                tokens: content,
            });
            if turns.len() >= m.cfg.max_turns {
                reason = TerminationReason::TurnCap;
                break;
            }
        }
    }

    Ok(GeneratedDialogue {
        id: req.id.clone(),
        goals: req.goals.clone(),
        turns,
        termination_reason: reason,
        role_confusions: confusions,
    })
}

/// Rolls out a full dialogue from a goal list and a user seed turn.
pub fn generate_dialogue<S: Scalar>(
    model: &Model<S>,
    schema: &GoalSchema,
    req: &GenerationRequest,
) -> Result<GeneratedDialogue> {
    match model {
        Model::Gduha(m) | Model::Hred(m) => generate_hierarchical(m, schema, req),
        Model::Lmg(m) => generate_lm(m, schema, req),
    }
}

fn validate_context(context: &[Utterance], role: Role) -> Result<()> {
    for (i, turn) in context.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Agent };
        if turn.role != expected {
            return Err(Error::Generation(format!(
                "context turn {i} is {}, expected {expected}",
                turn.role
            )));
        }
        if turn.tokens.is_empty() {
            return Err(Error::Generation(format!("context turn {i} is empty")));
        }
    }
    let expected_next = match context.last() {
        Some(last) => last.role.other(),
        None => Role::User,
    };
    if role != expected_next {
        return Err(Error::Generation(format!(
            "next turn belongs to {expected_next}, not {role}"
        )));
    }
    Ok(())
}

/// Generates the single next turn for `role` given an alternating context.
pub fn generate_response<S: Scalar>(
    model: &Model<S>,
    schema: &GoalSchema,
    goals: &[Goal],
    context: &[Utterance],
    role: Role,
) -> Result<Utterance> {
    validate_context(context, role)?;
    match model {
        Model::Gduha(m) | Model::Hred(m) => {
            let mut g: Graph<S> = Graph::new();
            let mut st = m.init_state(&mut g, schema, goals)?;
            for turn in context {
                m.consume_turn(&mut g, &mut st, turn.role, &turn.tokens)?;
            }
            let tokens = m.greedy_decode(&mut g, role, st.prev_final)?;
            Ok(Utterance { role, tokens })
        }
        Model::Lmg(m) => {
            let mut g: Graph<S> = Graph::new();
            let mut state = m.initial_state(&mut g, schema, goals)?;
            let mut prefix = vec![BOS];
            for turn in context {
                prefix.extend_from_slice(turn.content_tokens());
                prefix.push(turn.role.eou_token());
            }
            let mut logits = None;
            for &tok in &prefix {
                let (next, l) = m.step(&mut g, &state, tok)?;
                state = next;
                logits = Some(l);
            }
            let mut tokens = Vec::new();
            while tokens.len() < m.cfg.max_seq_len {
                let l = logits.expect("prefix is non-empty");
                let tok = argmax_excluding(g.value(l).data(), &[PAD, BOS]);
                if tok == EOS || tok == EOU_USER || tok == EOU_AGENT {
                    tokens.push(EOS);
                    break;
                }
                tokens.push(tok);
                let (next, nl) = m.step(&mut g, &state, tok)?;
                state = next;
                logits = Some(nl);
            }
            if tokens.is_empty() {
                tokens.push(EOS);
            }
            Ok(Utterance { role, tokens })
        }
    }
}

/// Applies `f` to every item on `threads` scoped threads, preserving input
/// order in the result. Items are split into contiguous chunks, so the
/// output is identical to the sequential run.
pub fn parallel_map<T, U, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk_size = items.len().div_ceil(threads);
    let chunks: Vec<&[T]> = items.chunks(chunk_size).collect();
    let mut results: Vec<Result<Vec<U>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| scope.spawn(|| chunk.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        for h in handles {
            results.push(h.join().expect("worker thread panicked"));
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}
