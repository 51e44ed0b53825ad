//! Non-edge token pruning.
//!
//! A pruning stage scores every token with a linear head and a sigmoid,
//! keeps the tokens whose score reaches the stage threshold, and physically
//! removes the rest before the layer's attention. Masks from successive
//! stages are lifted to original token coordinates so that, after the
//! encoder, every stage output can be scattered back to full length: a
//! position that survived holds the stage output, a position pruned at stage
//! `t` holds the pre-pruning feature it had at stage `t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Matrix, Real, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PruneError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("threshold {0} outside [0, 1]")]
    ThresholdOutOfRange(f64),
    #[error("mask length {mask} does not match {expected} tokens")]
    LengthMismatch { mask: usize, expected: usize },
    #[error("projection would retain no tokens")]
    EmptyRetention,
    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),
    #[error("snapshot chain inconsistent at stage {stage}: {reason}")]
    InconsistentSnapshots { stage: usize, reason: String },
    #[error(transparent)]
    Schedule(#[from] ScheduleViolation),
}

pub type Result<T, E = PruneError> = std::result::Result<T, E>;

/// Token features bound to the original `h x w` token grid.
///
/// `origin_index[k]` is the original grid position of row `k`; it is strictly
/// increasing because projection preserves token order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T = f32> {
    features: Matrix<T>,
    grid: (usize, usize),
    origin_index: Vec<usize>,
}

impl<T: Real> TokenSequence<T> {
    /// A full-length sequence (`h * w` rows, identity origin).
    pub fn new(features: Matrix<T>, grid: (usize, usize)) -> Result<Self> {
        let n = grid.0 * grid.1;
        Self::with_origin(features, grid, (0..n).collect())
    }

    pub fn with_origin(
        features: Matrix<T>,
        grid: (usize, usize),
        origin_index: Vec<usize>,
    ) -> Result<Self> {
        let n = grid.0 * grid.1;
        if features.rows() != origin_index.len() {
            return Err(PruneError::InvalidSequence(format!(
                "{} rows but {} origin indices",
                features.rows(),
                origin_index.len()
            )));
        }
        if origin_index.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PruneError::InvalidSequence(
                "origin indices must be strictly increasing".into(),
            ));
        }
        if origin_index.last().is_some_and(|&i| i >= n) {
            return Err(PruneError::InvalidSequence(format!(
                "origin index beyond the {n}-token grid"
            )));
        }
        Ok(Self {
            features,
            grid,
            origin_index,
        })
    }

    pub fn tokens(&self) -> usize {
        self.features.rows()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn into_features(self) -> Matrix<T> {
        self.features
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Token count of the unpruned grid.
    pub fn full_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn origin_index(&self) -> &[usize] {
        &self.origin_index
    }
}

/// Per-token edge probabilities from a stage's prediction head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScores {
    values: Vec<f64>,
}

impl EdgeScores {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(PruneError::InvalidSequence(
                "edge scores must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Stage-local keep (`true`) / prune (`false`) decisions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionMask {
    bits: Vec<bool>,
}

impl DecisionMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all_retained(n: usize) -> Self {
        Self {
            bits: vec![true; n],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn retained_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_all_retained(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// The index set of retained tokens, ascending.
    pub fn retained_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// A stage decision lifted to original token coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumulatedMask {
    bits: Vec<bool>,
}

impl AccumulatedMask {
    /// The mask before any stage: every original token retained.
    pub fn full(n: usize) -> Self {
        Self {
            bits: vec![true; n],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn retained_positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// One pruning stage: a 1-based encoder layer and its score threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneStage {
    pub layer: usize,
    pub threshold: f64,
}

/// Ordered pruning stages. Valid schedules have strictly increasing layers
/// and non-decreasing thresholds in `[0, 1]`; see [`validate_schedule`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PruneSchedule {
    pub stages: Vec<PruneStage>,
}

impl PruneSchedule {
    pub fn new(stages: &[(usize, f64)]) -> Self {
        Self {
            stages: stages
                .iter()
                .map(|&(layer, threshold)| PruneStage { layer, threshold })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn layers(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.layer).collect()
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.threshold).collect()
    }

    /// Same layers with thresholds replaced positionally.
    pub fn with_thresholds(&self, thresholds: &[f64]) -> Result<Self> {
        if thresholds.len() != self.stages.len() {
            return Err(PruneError::LengthMismatch {
                mask: thresholds.len(),
                expected: self.stages.len(),
            });
        }
        Ok(Self {
            stages: self
                .stages
                .iter()
                .zip(thresholds)
                .map(|(s, &threshold)| PruneStage {
                    layer: s.layer,
                    threshold,
                })
                .collect(),
        })
    }

    /// 0-based stage index of a 1-based layer, if that layer prunes.
    pub fn stage_at(&self, layer: usize) -> Option<usize> {
        self.stages.iter().position(|s| s.layer == layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    ThresholdOutOfRange,
    NonMonotoneThreshold,
    LayerOrder,
    LayerOutOfRange,
}

/// Why a schedule was rejected; `stage` is 1-based.
#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("schedule violation at stage {stage}: {message}")]
pub struct ScheduleViolation {
    pub stage: usize,
    pub kind: ViolationKind,
    pub message: String,
}

/// Accepts iff thresholds lie in `[0, 1]` and never decrease with depth, and
/// layers are strictly increasing within `1..=depth`.
pub fn validate_schedule(schedule: &PruneSchedule, depth: usize) -> Result<(), ScheduleViolation> {
    let mut prev: Option<PruneStage> = None;
    for (i, s) in schedule.stages.iter().enumerate() {
        let stage = i + 1;
        let fail = |kind, message: String| {
            Err(ScheduleViolation {
                stage,
                kind,
                message,
            })
        };
        if !(0.0..=1.0).contains(&s.threshold) {
            return fail(
                ViolationKind::ThresholdOutOfRange,
                format!("threshold {} outside [0, 1]", s.threshold),
            );
        }
        if s.layer == 0 || s.layer > depth {
            return fail(
                ViolationKind::LayerOutOfRange,
                format!("layer {} outside 1..={depth}", s.layer),
            );
        }
        if let Some(p) = prev {
            if s.layer <= p.layer {
                return fail(
                    ViolationKind::LayerOrder,
                    format!("layer {} does not follow layer {}", s.layer, p.layer),
                );
            }
            if s.threshold < p.threshold {
                return fail(
                    ViolationKind::NonMonotoneThreshold,
                    format!("threshold {} below previous {}", s.threshold, p.threshold),
                );
            }
        }
        prev = Some(*s);
    }
    Ok(())
}

/// `sigmoid(X · W + b)` for a `C x 1` head.
pub fn compute_edge_scores<T: Real>(
    x: &TokenSequence<T>,
    head_weights: &Matrix<T>,
    head_bias: T,
) -> Result<EdgeScores> {
    if head_weights.shape() != (x.channels(), 1) {
        return Err(TensorError::ShapeMismatch {
            op: "compute_edge_scores",
            left: x.features.shape(),
            right: head_weights.shape(),
        }
        .into());
    }
    let logits = tensor::matmul(&x.features, head_weights)?;
    let bias = Matrix::filled(1, 1, head_bias);
    let scores = tensor::sigmoid(&tensor::add_row(&logits, &bias)?)?;
    EdgeScores::new(scores.data().iter().map(|v| v.to_f64_lossy()).collect())
}

/// Keeps token `i` iff `score_i >= alpha`. The result may retain nothing.
pub fn threshold_mask(scores: &EdgeScores, alpha: f64) -> Result<DecisionMask> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(PruneError::ThresholdOutOfRange(alpha));
    }
    Ok(DecisionMask::new(
        scores.values.iter().map(|&p| p >= alpha).collect(),
    ))
}

/// [`threshold_mask`], except that a threshold pruning every token keeps the
/// single highest-scoring one (the first on ties) and logs a warning.
pub fn decide_retention(scores: &EdgeScores, alpha: f64) -> Result<DecisionMask> {
    let mask = threshold_mask(scores, alpha)?;
    if mask.retained_count() > 0 || scores.is_empty() {
        return Ok(mask);
    }
    let best = scores
        .values
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > scores.values[b] { i } else { b });
    log::warn!(
        "threshold {alpha} pruned all {} tokens; keeping token {best} (score {:.4})",
        scores.len(),
        scores.values[best]
    );
    let mut bits = vec![false; scores.len()];
    bits[best] = true;
    Ok(DecisionMask::new(bits))
}

/// Hard projection: keeps the retained rows in order and composes the origin
/// index through the mask.
pub fn project_tokens<T: Real>(x: &TokenSequence<T>, mask: &DecisionMask) -> Result<TokenSequence<T>> {
    if mask.len() != x.tokens() {
        return Err(PruneError::LengthMismatch {
            mask: mask.len(),
            expected: x.tokens(),
        });
    }
    let keep = mask.retained_indices();
    if keep.is_empty() {
        return Err(PruneError::EmptyRetention);
    }
    let features = x.features.gather_rows(&keep)?;
    let origin = keep.iter().map(|&k| x.origin_index[k]).collect();
    TokenSequence::with_origin(features, x.grid, origin)
}

/// How attention logits are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `1 / sqrt(C / heads)`, the usual multi-head convention.
    #[default]
    PerHead,
    /// `1 / sqrt(C)` regardless of the head count.
    Literal,
}

impl AttentionScale {
    pub fn factor(self, channels: usize, heads: usize) -> f64 {
        match self {
            AttentionScale::PerHead => 1.0 / ((channels / heads) as f64).sqrt(),
            AttentionScale::Literal => 1.0 / (channels as f64).sqrt(),
        }
    }
}

/// Query/key/value and output projections of one attention sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    /// `C x 3C`, columns `[Q | K | V]`.
    pub qkv: Matrix<T>,
    /// `1 x 3C`.
    pub qkv_bias: Matrix<T>,
    /// `C x C`.
    pub out: Matrix<T>,
    /// `1 x C`.
    pub out_bias: Matrix<T>,
}

/// Multi-head self-attention restricted to the tokens present in `x`.
pub fn pruned_attention<T: Real>(
    x: &TokenSequence<T>,
    weights: &AttentionWeights<T>,
    heads: usize,
    scale: AttentionScale,
) -> Result<TokenSequence<T>> {
    let c = x.channels();
    if heads == 0 || c % heads != 0 {
        return Err(TensorError::InvalidArgument {
            op: "pruned_attention",
            reason: format!("{c} channels not divisible by {heads} heads"),
        }
        .into());
    }
    if weights.qkv.shape() != (c, 3 * c) || weights.out.shape() != (c, c) {
        return Err(TensorError::ShapeMismatch {
            op: "pruned_attention",
            left: weights.qkv.shape(),
            right: weights.out.shape(),
        }
        .into());
    }
    let qkv = tensor::add_row(&tensor::matmul(&x.features, &weights.qkv)?, &weights.qkv_bias)?;
    let (attended, _) = tensor::attention(&qkv, heads, T::lit(scale.factor(c, heads)))?;
    let out = tensor::add_row(&tensor::matmul(&attended, &weights.out)?, &weights.out_bias)?;
    TokenSequence::with_origin(out, x.grid, x.origin_index.clone())
}

/// Lifts a stage-local mask into original coordinates: the `k`-th set bit of
/// `prev` takes the value of `stage.bits[k]`; cleared bits stay cleared.
pub fn accumulate_mask(prev: &AccumulatedMask, stage: &DecisionMask) -> Result<AccumulatedMask> {
    let retained = prev.popcount();
    if stage.len() != retained {
        return Err(PruneError::LengthMismatch {
            mask: stage.len(),
            expected: retained,
        });
    }
    let mut bits = prev.bits.clone();
    for (&pos, &keep) in prev.retained_positions().iter().zip(&stage.bits) {
        bits[pos] = keep;
    }
    Ok(AccumulatedMask { bits })
}

/// The pre-pruning input of one stage and that stage's decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSnapshot<T = f32> {
    pub input: TokenSequence<T>,
    pub mask: DecisionMask,
}

/// Scatters `z` (the retained tokens after the last snapshot's stage) back
/// to full length, walking the snapshots from the deepest stage to the
/// first. At stage `t` the working sequence starts as a copy of that stage's
/// input and the retained rows are overwritten.
pub fn recover_sequence<T: Real>(
    z: &TokenSequence<T>,
    snapshots: &[StageSnapshot<T>],
) -> Result<TokenSequence<T>> {
    let mut current = z.features.clone();
    for (t, snap) in snapshots.iter().enumerate().rev() {
        let stage = t + 1;
        if snap.mask.len() != snap.input.tokens() {
            return Err(PruneError::InconsistentSnapshots {
                stage,
                reason: format!(
                    "mask covers {} tokens, input has {}",
                    snap.mask.len(),
                    snap.input.tokens()
                ),
            });
        }
        if snap.mask.retained_count() != current.rows() {
            return Err(PruneError::InconsistentSnapshots {
                stage,
                reason: format!(
                    "{} retained positions but {} rows to scatter",
                    snap.mask.retained_count(),
                    current.rows()
                ),
            });
        }
        let mut full = snap.input.features.clone();
        full.scatter_rows(&snap.mask.retained_indices(), &current)?;
        current = full;
    }
    if current.rows() != z.full_len() {
        return Err(PruneError::InconsistentSnapshots {
            stage: 0,
            reason: format!(
                "recovered {} rows, grid has {}",
                current.rows(),
                z.full_len()
            ),
        });
    }
    TokenSequence::new(current, z.grid)
}
