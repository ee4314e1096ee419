//! Adam training loop with early stopping on validation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{Adam, AdamConfig};
use crate::corpus::{Dialogue, GoalSchema};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::{Error, Result};

use super::{Model, Sampler};

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Number of non-improving epochs tolerated after the best one.
    pub patience: usize,
    /// Probability that a turn's context input is the model's own sample.
    pub scheduled_sampling: f64,
    /// Global L2 gradient clip applied before every update.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 50,
            patience: 5,
            scheduled_sampling: 0.5,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

/// Per-epoch averages: token NLL over the train split, then token NLL and
/// per-turn end-of-dialogue loss over the validation split.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_nll: f64,
    pub eod_loss: f64,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,train_nll,valid_nll,eod_loss";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.train_nll, self.valid_nll, self.eod_loss
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Summed validation loss at the best epoch.
    pub best_valid: f64,
}

struct SplitTotals {
    nll: f64,
    eod: f64,
    tokens: usize,
    turns: usize,
    dialogues: usize,
}

impl SplitTotals {
    fn new() -> Self {
        SplitTotals {
            nll: 0.0,
            eod: 0.0,
            tokens: 0,
            turns: 0,
            dialogues: 0,
        }
    }

    fn per_token_nll(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.nll / self.tokens as f64
        }
    }

    fn per_turn_eod(&self) -> f64 {
        if self.turns == 0 {
            0.0
        } else {
            self.eod / self.turns as f64
        }
    }

    fn total(&self) -> f64 {
        self.nll + self.eod
    }
}

fn validate_pass<S: Scalar>(
    model: &Model<S>,
    schema: &GoalSchema,
    split: &[Dialogue],
) -> Result<SplitTotals> {
    let mut totals = SplitTotals::new();
    for d in split {
        let mut g: Graph<S> = Graph::new();
        let loss = model.dialogue_loss(&mut g, schema, d, &mut None)?;
        totals.nll += g.value(loss.nll_sum).item().to_f64();
        totals.eod += g.value(loss.eod_sum).item().to_f64();
        totals.tokens += loss.token_count;
        totals.turns += loss.eod_count;
        totals.dialogues += 1;
    }
    Ok(totals)
}

/// Trains in place. Returns per-epoch statistics; the model is left holding
/// the parameters of the best validation epoch. With an empty validation
/// split the training split doubles as the validation set.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    schema: &GoalSchema,
    train_split: &[Dialogue],
    valid_split: &[Dialogue],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_split.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if !(0.0..=1.0).contains(&cfg.scheduled_sampling) {
        return Err(Error::Config(format!(
            "scheduled_sampling {} outside [0, 1]",
            cfg.scheduled_sampling
        )));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config(
            "batch_size and max_epochs must be positive".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        model.params(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let clip = S::from_f64(cfg.grad_clip);

    let mut epochs = Vec::new();
    let mut best_valid = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_snapshot = model.params().snapshot();
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train_split.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_totals = SplitTotals::new();
        for batch in order.chunks(cfg.batch_size) {
            model.params_mut().zero_grads();
            for &i in batch {
                let d = &train_split[i];
                let mut g: Graph<S> = Graph::new();
                let mut sampler = Some(Sampler {
                    rng: &mut rng,
                    prob: cfg.scheduled_sampling,
                });
                let loss = model.dialogue_loss(&mut g, schema, d, &mut sampler)?;
                let total = g.value(loss.total).item().to_f64();
                if !total.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss on dialogue {} at epoch {epoch}",
                        d.id
                    )));
                }
                train_totals.nll += g.value(loss.nll_sum).item().to_f64();
                train_totals.eod += g.value(loss.eod_sum).item().to_f64();
                train_totals.tokens += loss.token_count;
                train_totals.turns += loss.eod_count;
                g.backward(loss.total, model.params_mut())?;
            }
            let norm = model.params_mut().clip_grads(clip);
            if !norm.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite gradient norm at epoch {epoch}"
                )));
            }
            adam.step(model.params_mut());
        }

        let valid_totals = if valid_split.is_empty() {
            validate_pass(model, schema, train_split)?
        } else {
            validate_pass(model, schema, valid_split)?
        };
        epochs.push(EpochStats {
            epoch,
            train_nll: train_totals.per_token_nll(),
            valid_nll: valid_totals.per_token_nll(),
            eod_loss: valid_totals.per_turn_eod(),
        });

        let score = valid_totals.total();
        if score < best_valid {
            best_valid = score;
            best_epoch = epoch;
            best_snapshot = model.params().snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }

    model.params_mut().restore(&best_snapshot);
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_valid,
    })
}
