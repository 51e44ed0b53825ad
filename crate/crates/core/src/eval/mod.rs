//! Boundary evaluation: oriented non-maximum suppression, tolerance-radius
//! correspondence, and ODS / OIS / AP with precision-recall curves.

mod matching;
mod nms;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use matching::{match_edges, match_maps, max_bipartite_matching, tolerance_radius};
pub use nms::{nms, nms_with_factor, NMS_DOMINANCE};

use crate::data::BinaryMap;
use rayon::prelude::*;

use crate::data::Sample;
use crate::model::{EdgeMap, PruneMode, SedModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    Dimension {
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("tolerance {0} outside (0, 1)")]
    Tolerance(f64),
    #[error("ground truth needs at least one annotator map")]
    NoAnnotators,
    #[error("annotator maps disagree in size")]
    AnnotatorShape,
    #[error("nothing to evaluate")]
    EmptyDataset,
    #[error("need at least two thresholds, got {0}")]
    Thresholds(usize),
    #[error("image {id} has {found} threshold entries, expected {expected}")]
    CountLength {
        id: String,
        found: usize,
        expected: usize,
    },
}

/// One or more annotator maps of equal size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthSet {
    maps: Vec<BinaryMap>,
}

impl GroundTruthSet {
    pub fn new(maps: Vec<BinaryMap>) -> Result<Self, EvalError> {
        let first = maps.first().ok_or(EvalError::NoAnnotators)?;
        let dims = (first.height(), first.width());
        if maps.iter().any(|m| (m.height(), m.width()) != dims) {
            return Err(EvalError::AnnotatorShape);
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[BinaryMap] {
        &self.maps
    }

    pub fn height(&self) -> usize {
        self.maps[0].height()
    }

    pub fn width(&self) -> usize {
        self.maps[0].width()
    }

    /// Pixelwise OR of all annotators.
    pub fn union(&self) -> BinaryMap {
        self.maps[1..]
            .iter()
            .fold(self.maps[0].clone(), |acc, m| acc.union(m).expect("same shape"))
    }
}

/// An edge map after suppression; suppressed pixels are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinnedEdgeMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ThinnedEdgeMap {
    fn new(height: usize, width: usize, values: Vec<f64>) -> Self {
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Pixels with value `>= t`.
    pub fn binarize(&self, t: f64) -> BinaryMap {
        BinaryMap::new(
            self.height,
            self.width,
            self.values.iter().map(|&v| v > 0.0 && v >= t).collect(),
        )
        .expect("matching size")
    }
}

/// Pixel correspondence counts for one image at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub matched_pred: u64,
    pub total_pred: u64,
    pub matched_gt: u64,
    pub total_gt: u64,
}

impl MatchCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.matched_pred, self.total_pred)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.matched_gt, self.total_gt)
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }
}

impl std::ops::Add for MatchCounts {
    type Output = MatchCounts;

    fn add(self, o: MatchCounts) -> MatchCounts {
        MatchCounts {
            matched_pred: self.matched_pred + o.matched_pred,
            total_pred: self.total_pred + o.total_pred,
            matched_gt: self.matched_gt + o.matched_gt,
            total_gt: self.total_gt + o.total_gt,
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// `k` thresholds evenly spaced strictly inside `(0, 1)`: `i / (k + 1)`.
pub fn uniform_thresholds(k: usize) -> Vec<f64> {
    (1..=k).map(|i| i as f64 / (k + 1) as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
    pub ap: f64,
    pub images: usize,
    /// One point per threshold, in ascending threshold order.
    pub pr: Vec<PrPoint>,
    /// Per-image best thresholds (by id), as used for OIS.
    pub best_thresholds: BTreeMap<String, f64>,
}

impl EvalSummary {
    /// `threshold,precision,recall,f` rows.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f\n");
        for p in &self.pr {
            writeln!(s, "{},{},{},{}", p.threshold, p.precision, p.recall, p.f).expect("string");
        }
        s
    }
}

/// Interpolated average precision: precision is replaced by its running
/// maximum from the high-recall end and integrated over recall from 0.
pub fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut best = 0.0f64;
    let mut interp = vec![0.0; pts.len()];
    for i in (0..pts.len()).rev() {
        best = best.max(pts[i].1);
        interp[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (i, &(r, _)) in pts.iter().enumerate() {
        ap += (r - prev_r) * interp[i];
        prev_r = r;
    }
    ap
}

/// Dataset metrics from per-image counts, where `per_image[id][k]` holds the
/// counts at `thresholds[k]`.
pub fn compute_metrics(
    per_image: &BTreeMap<String, Vec<MatchCounts>>,
    thresholds: &[f64],
) -> Result<EvalSummary, EvalError> {
    if per_image.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if thresholds.len() < 2 {
        return Err(EvalError::Thresholds(thresholds.len()));
    }
    for (id, c) in per_image {
        if c.len() != thresholds.len() {
            return Err(EvalError::CountLength {
                id: id.clone(),
                found: c.len(),
                expected: thresholds.len(),
            });
        }
    }
    let pooled: Vec<MatchCounts> = (0..thresholds.len())
        .map(|k| per_image.values().fold(MatchCounts::default(), |a, c| a + c[k]))
        .collect();
    let pr: Vec<PrPoint> = thresholds
        .iter()
        .zip(&pooled)
        .map(|(&t, c)| PrPoint {
            threshold: t,
            precision: c.precision(),
            recall: c.recall(),
            f: c.f_measure(),
        })
        .collect();
    let (ods_k, ods) = pr
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, p)| if p.f > best.1 { (k, p.f) } else { best });

    let mut best_thresholds = BTreeMap::new();
    let mut ois_counts = MatchCounts::default();
    for (id, counts) in per_image {
        let (k, _) = counts
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, c)| {
                let f = c.f_measure();
                if f > best.1 {
                    (k, f)
                } else {
                    best
                }
            });
        ois_counts = ois_counts + counts[k];
        best_thresholds.insert(id.clone(), thresholds[k]);
    }
    let ap = interpolated_ap(&pr.iter().map(|p| (p.recall, p.precision)).collect::<Vec<_>>());
    Ok(EvalSummary {
        ods,
        ods_threshold: thresholds[ods_k],
        ois: ois_counts.f_measure(),
        ap,
        images: per_image.len(),
        pr,
        best_thresholds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Matching radius as a fraction of the image diagonal.
    pub tolerance: f64,
    /// Number of uniformly spaced binarisation thresholds.
    pub thresholds: usize,
    /// Apply non-maximum suppression before thresholding.
    pub nms: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance: 0.0075,
            thresholds: 99,
            nms: true,
        }
    }
}

impl EvalConfig {
    pub fn threshold_values(&self) -> Vec<f64> {
        uniform_thresholds(self.thresholds)
    }
}

/// Thins (optionally), then matches at every threshold.
pub fn evaluate_image(
    map: &EdgeMap,
    gt: &GroundTruthSet,
    cfg: &EvalConfig,
) -> Result<Vec<MatchCounts>, EvalError> {
    let thinned = if cfg.nms {
        nms(map)
    } else {
        ThinnedEdgeMap::new(map.height(), map.width(), map.values().to_vec())
    };
    cfg.threshold_values()
        .iter()
        .map(|&t| match_edges(&thinned.binarize(t), gt, cfg.tolerance))
        .collect()
}

/// Order-independent collection of per-image counts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalAccumulator {
    per_image: BTreeMap<String, Vec<MatchCounts>>,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds counts for `id`; counts for an id seen before are summed.
    pub fn insert(&mut self, id: impl Into<String>, counts: Vec<MatchCounts>) {
        match self.per_image.entry(id.into()) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(counts);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                for (a, b) in e.get_mut().iter_mut().zip(counts) {
                    *a = *a + b;
                }
            }
        }
    }

    pub fn merge(mut self, other: EvalAccumulator) -> Self {
        for (id, c) in other.per_image {
            self.insert(id, c);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.per_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_image.is_empty()
    }

    pub fn per_image(&self) -> &BTreeMap<String, Vec<MatchCounts>> {
        &self.per_image
    }

    pub fn summarize(&self, thresholds: &[f64]) -> Result<EvalSummary, EvalError> {
        compute_metrics(&self.per_image, thresholds)
    }
}

/// Per-image results of running a model over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEvaluation {
    pub summary: EvalSummary,
    /// Instrumented multiply-accumulates of each forward pass, in sample order.
    pub macs: Vec<u64>,
    /// Tokens entering each layer's attention, per sample.
    pub token_counts: Vec<Vec<usize>>,
    /// Per sample and stage, the edge scores of the scored tokens.
    pub stage_scores: Vec<Vec<Vec<f64>>>,
}

impl ModelEvaluation {
    pub fn mean_macs(&self) -> f64 {
        self.macs.iter().map(|&m| m as f64).sum::<f64>() / self.macs.len().max(1) as f64
    }
}

/// Runs `model` on every sample in parallel on the current rayon pool,
/// evaluates the predictions and merges the counts.
pub fn evaluate_model(
    model: &SedModel<f32>,
    samples: &[Sample],
    mode: &PruneMode,
    cfg: &EvalConfig,
) -> crate::Result<ModelEvaluation> {
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset.into());
    }
    let per_sample = samples
        .par_iter()
        .map(|s| -> crate::Result<_> {
            let (map, trace) = model.forward(&s.image, mode)?;
            let counts = evaluate_image(&map, &s.gt, cfg)?;
            let scores = trace.stages.iter().map(|st| st.scores.values().to_vec()).collect();
            Ok((s.id.clone(), counts, trace.macs, trace.token_counts, scores))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let mut acc = EvalAccumulator::new();
    let mut macs = Vec::with_capacity(samples.len());
    let mut token_counts = Vec::with_capacity(samples.len());
    let mut stage_scores = Vec::with_capacity(samples.len());
    for (id, counts, m, tokens, scores) in per_sample {
        acc.insert(id, counts);
        macs.push(m);
        token_counts.push(tokens);
        stage_scores.push(scores);
    }
    Ok(ModelEvaluation {
        summary: acc.summarize(&cfg.threshold_values())?,
        macs,
        token_counts,
        stage_scores,
    })
}
