//! Desk-scale training: class-balanced cross-entropy on the final edge map,
//! score-head supervision against patch-level labels, and Adam or SGD with
//! momentum.
//!
//! Pruning decisions are constants of each forward pass. Gradients reach
//! retained tokens through attention and every token through the recovered
//! decoder inputs; the score heads learn only from their own supervision.

mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{Optimizer, OptimizerKind};

use crate::data::{BinaryMap, Sample};
use crate::model::{ForwardTrace, ModelError, PruneMode, SedConfig, SedModel};
use crate::tensor::{GradTape, Gradients, Real, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },
    #[error("no training samples")]
    EmptyData,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("label shape {found:?} does not match prediction {expected:?}")]
    LabelShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lambda_final: f64,
    pub lambda_heads: f64,
    pub seed: u64,
    /// Apply the schedule during training forward passes; otherwise train
    /// unpruned and prune only at inference.
    pub prune_during_training: bool,
    /// Random left-right flips.
    pub flip: bool,
    /// Rescale the averaged gradient to at most this global norm.
    pub grad_clip: Option<f64>,
    /// Steps between intermediate checkpoints written by callers; 0 writes
    /// only the final weights.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            lambda_final: 1.0,
            lambda_heads: 1.0,
            seed: 7,
            prune_during_training: false,
            flip: true,
            grad_clip: None,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.lambda_final >= 0.0 && self.lambda_heads >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("gradient clip must be positive");
        }
        self.optimizer.validate().map_err(TrainError::Config)
    }
}

/// Weight of the positive class: the fraction of negatives, clamped to
/// `[0.05, 0.95]`.
pub fn balance_weight(labels: &[bool]) -> f64 {
    if labels.is_empty() {
        return 0.5;
    }
    let neg = labels.iter().filter(|&&y| !y).count();
    (neg as f64 / labels.len() as f64).clamp(0.05, 0.95)
}

/// `-beta sum_{y=1} log p - (1 - beta) sum_{y=0} log(1 - p)` with `p`
/// clamped to `[1e-6, 1 - 1e-6]` and `beta` from [`balance_weight`].
pub fn class_balanced_bce(pred: &[f64], labels: &[bool]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(TrainError::LabelShape {
            expected: (pred.len(), 1),
            found: (labels.len(), 1),
        });
    }
    let beta = balance_weight(labels);
    Ok(pred
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-6, 1.0 - 1e-6);
            if y {
                -beta * p.ln()
            } else {
                -(1.0 - beta) * (1.0 - p).ln()
            }
        })
        .sum())
}

/// Token-grid labels: a patch is positive iff any of its pixels is an edge.
pub fn patch_labels(gt: &BinaryMap, patch: usize) -> Vec<bool> {
    let (gh, gw) = (gt.height() / patch, gt.width() / patch);
    let mut labels = vec![false; gh * gw];
    for (y, x) in gt.pixels() {
        if y / patch < gh && x / patch < gw {
            labels[(y / patch) * gw + x / patch] = true;
        }
    }
    labels
}

/// Per-stage score-head losses of a traced pass, over the tokens each stage
/// scored.
pub fn head_supervision<T: Real>(trace: &ForwardTrace<T>, gt: &BinaryMap, patch: usize) -> Result<Vec<f64>> {
    let labels = patch_labels(gt, patch);
    trace
        .stages
        .iter()
        .map(|st| {
            let y: Vec<bool> = st.origin_index.iter().map(|&i| labels[i]).collect();
            class_balanced_bce(st.scores.values(), &y)
        })
        .collect()
}

/// Loss terms of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub final_term: f64,
    pub head_terms: Vec<f64>,
}

/// Records the training loss of one sample on `tape`; returns the scalar
/// total and its decomposition.
pub fn loss_on_tape<T: Real>(
    model: &SedModel<T>,
    tape: &mut GradTape<'_, T>,
    sample: &Sample,
    mode: &PruneMode,
    cfg: &TrainConfig,
) -> Result<(Var, LossParts, ForwardTrace<T>)> {
    let out = model.forward_tape(tape, &sample.image, mode)?;
    let gt = sample.gt.union();
    let (hh, ww) = model.config().image_size;
    if (gt.height(), gt.width()) != (hh, ww) {
        return Err(TrainError::LabelShape {
            expected: (hh, ww),
            found: (gt.height(), gt.width()),
        });
    }
    let pixels = gt.bits().to_vec();
    let beta = balance_weight(&pixels);
    let final_loss = tape.weighted_bce_with_logits(out.logits, pixels, T::lit(beta))?;
    let labels = patch_labels(&gt, model.config().patch_size);
    let mut terms = vec![(final_loss, T::lit(cfg.lambda_final))];
    let mut head_vars = Vec::new();
    for (st, &logits) in out.trace.stages.iter().zip(&out.score_logits) {
        let y: Vec<bool> = st.origin_index.iter().map(|&i| labels[i]).collect();
        let b = balance_weight(&y);
        let v = tape.weighted_bce_with_logits(logits, y, T::lit(b))?;
        head_vars.push(v);
        terms.push((v, T::lit(cfg.lambda_heads)));
    }
    let total = tape.weighted_sum(&terms)?;
    let scalar = |v: Var, tape: &GradTape<'_, T>| tape.value(v).get(0, 0).to_f64_lossy();
    let parts = LossParts {
        total: scalar(total, tape),
        final_term: scalar(final_loss, tape),
        head_terms: head_vars.iter().map(|&v| scalar(v, tape)).collect(),
    };
    Ok((total, parts, out.trace))
}

/// Loss and parameter gradients of one sample.
pub fn loss_and_gradients<T: Real>(
    model: &SedModel<T>,
    sample: &Sample,
    mode: &PruneMode,
    cfg: &TrainConfig,
) -> Result<(LossParts, Gradients<T>, ForwardTrace<T>)> {
    let mut tape = GradTape::new(model.params());
    let (total, parts, trace) = loss_on_tape(model, &mut tape, sample, mode, cfg)?;
    let grads = tape.backward(total, T::one())?;
    Ok((parts, grads, trace))
}

/// One training step's record, also written as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    /// Batch means.
    pub total: f64,
    pub final_term: f64,
    pub head_terms: Vec<f64>,
    /// Global norm of the averaged gradient before clipping.
    pub grad_norm: f64,
    /// Mean fraction of tokens kept by each stage, relative to the full grid.
    pub retained_fraction: Vec<f64>,
}

/// Receives each step's report and may inspect the current weights.
pub trait TrainObserver {
    fn on_step(&mut self, _report: &LossReport, _model: &SedModel<f32>) -> crate::Result<()> {
        Ok(())
    }
}

/// Ignores all progress.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

fn flipped(sample: &Sample) -> Sample {
    let maps = sample.gt.maps().iter().map(BinaryMap::flipped).collect();
    Sample {
        id: sample.id.clone(),
        image: sample.image.flipped(),
        gt: crate::eval::GroundTruthSet::new(maps).expect("same shapes"),
    }
}

fn divergence(iteration: usize, e: impl std::fmt::Display) -> TrainError {
    TrainError::Divergence {
        iteration,
        detail: e.to_string(),
    }
}

/// Trains `model` in place for `cfg.iterations` steps and returns the report
/// of every step. Deterministic for a fixed seed: batches are drawn from a
/// seeded generator and samples are processed sequentially.
pub fn train(
    cfg: &TrainConfig,
    data: &[Sample],
    model: &mut SedModel<f32>,
    observer: &mut dyn TrainObserver,
) -> crate::Result<Vec<LossReport>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData.into());
    }
    let mode = if cfg.prune_during_training {
        PruneMode::Schedule
    } else {
        PruneMode::Disabled
    };
    let n_tokens = model.config().tokens() as f64;
    let n_stages = model.config().schedule.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.params());
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut grads = Gradients::zeros_like(model.params());
        let mut total = 0.0;
        let mut final_term = 0.0;
        let mut heads = vec![0.0; n_stages];
        let mut kept = vec![0.0; n_stages];
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..data.len());
            let flip = cfg.flip && rng.random_bool(0.5);
            let owned;
            let sample = if flip {
                owned = flipped(&data[idx]);
                &owned
            } else {
                &data[idx]
            };
            let (parts, g, trace) = match loss_and_gradients(model, sample, &mode, cfg) {
                Ok(r) => r,
                Err(
                    TrainError::Tensor(e @ TensorError::NonFinite { .. })
                    | TrainError::Model(ModelError::Tensor(e @ TensorError::NonFinite { .. })),
                ) => return Err(divergence(it, e).into()),
                Err(e) => return Err(e.into()),
            };
            if !parts.total.is_finite() {
                return Err(divergence(it, format!("loss is {}", parts.total)).into());
            }
            grads.accumulate(&g).map_err(TrainError::from)?;
            total += parts.total;
            final_term += parts.final_term;
            for (h, v) in heads.iter_mut().zip(&parts.head_terms) {
                *h += v;
            }
            for (k, st) in kept.iter_mut().zip(&trace.stages) {
                *k += st.retained() as f64 / n_tokens;
            }
        }
        let b = cfg.batch_size as f64;
        grads.scale(1.0 / b as f32);
        let grad_norm = f64::from(grads.global_norm());
        if !grad_norm.is_finite() {
            return Err(divergence(it, "gradient is not finite").into());
        }
        if let Some(clip) = cfg.grad_clip {
            if grad_norm > clip {
                grads.scale((clip / grad_norm) as f32);
            }
        }
        opt.step(model.params_mut(), &grads);
        let report = LossReport {
            iteration: it,
            total: total / b,
            final_term: final_term / b,
            head_terms: heads.iter().map(|h| h / b).collect(),
            grad_norm,
            retained_fraction: kept.iter().map(|k| k / b).collect(),
        };
        observer.on_step(&report, model)?;
        history.push(report);
    }
    Ok(history)
}

/// A configuration small enough for exhaustive finite-difference checks.
pub fn gradcheck_config() -> SedConfig {
    use crate::model::FusionTap;
    SedConfig {
        image_size: (16, 16),
        patch_size: 4,
        depth: 2,
        channels: 8,
        heads: 2,
        schedule: crate::prune::PruneSchedule::new(&[(1, 0.5), (2, 0.5)]),
        fusion: vec![FusionTap::Stage(1), FusionTap::Stage(2), FusionTap::Final],
        stage_channels: 4,
        decoder_hidden: 6,
        ..SedConfig::micro()
    }
}
