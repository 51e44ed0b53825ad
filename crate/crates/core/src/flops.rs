//! Analytic multiply-accumulate (MAC) accounting for pruned ViT-style
//! encoders with the linear fusion decoder.
//!
//! One multiply-add counts as one operation, matching the convention behind
//! published "GFLOPs" figures for ViT backbones. Only matrix products are
//! counted; norms, softmax, activations and bias additions are excluded.
//!
//! For a global-attention layer with `n` tokens, width `C` and MLP ratio `r`:
//!
//! | part | MACs |
//! |---|---|
//! | QKV, output and MLP projections | `(4 + 2r) n C^2` |
//! | attention logits and weighted sum | `2 n^2 C` |
//! | windowed attention (window of `w` tokens) | `2 n w C` |
//!
//! Patch embedding costs `N C p^2 c_in`. A score head at a pruning layer
//! costs `n_in C`, with `n_in` the tokens entering that layer. The decoder
//! with `k` taps of width `D_s`, hidden width `D_h` and `o` outputs per token
//! costs `k N C D_s + N (k D_s) D_h + N D_h o`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ForwardTrace, SedConfig};
use crate::prune::{validate_schedule, PruneError, PruneSchedule};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlopsError {
    #[error("retention profile has {found} entries for a depth-{depth} encoder")]
    ProfileLength { found: usize, depth: usize },
    #[error("retention profile invalid: {0}")]
    Profile(String),
    #[error("architecture invalid: {0}")]
    Spec(String),
    #[error(transparent)]
    Schedule(#[from] PruneError),
}

pub type Result<T, E = FlopsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLayout {
    Global,
    Windowed { window_tokens: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub taps: usize,
    pub stage_channels: usize,
    pub hidden: usize,
    pub outputs_per_token: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub tokens: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    /// One entry per layer.
    pub attention: Vec<AttentionLayout>,
    /// 1-based layers that carry a score head.
    pub score_heads: Vec<usize>,
    pub decoder: DecoderSpec,
}

impl ArchSpec {
    fn vit(channels: usize, depth: usize, heads: usize) -> Self {
        Self {
            tokens: 4096,
            channels,
            depth,
            heads,
            mlp_ratio: 4,
            patch_size: 16,
            in_channels: 3,
            attention: vec![AttentionLayout::Global; depth],
            score_heads: Vec::new(),
            decoder: DecoderSpec {
                taps: 4,
                stage_channels: 256,
                hidden: 256,
                outputs_per_token: 256,
            },
        }
    }

    /// ViT-B/16 at 1024x1024 (4096 tokens) with a 4-tap decoder.
    pub fn vit_b() -> Self {
        Self::vit(768, 12, 12)
    }

    /// ViT-L/16 at 1024x1024 (4096 tokens) with a 4-tap decoder.
    pub fn vit_l() -> Self {
        Self::vit(1024, 24, 16)
    }

    /// The architecture of an edge-detector configuration, including its
    /// score heads.
    pub fn from_sed(cfg: &SedConfig) -> Self {
        Self {
            tokens: cfg.tokens(),
            channels: cfg.channels,
            depth: cfg.depth,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            patch_size: cfg.patch_size,
            in_channels: cfg.in_channels,
            attention: vec![AttentionLayout::Global; cfg.depth],
            score_heads: cfg.schedule.layers(),
            decoder: DecoderSpec {
                taps: cfg.fusion.len(),
                stage_channels: cfg.stage_channels,
                hidden: cfg.decoder_hidden,
                outputs_per_token: cfg.outputs_per_token(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlopsError::Spec(m.into()));
        if self.tokens == 0 || self.channels == 0 || self.patch_size == 0 || self.in_channels == 0 {
            return bad("dimensions must be positive");
        }
        if self.attention.len() != self.depth {
            return bad("attention layout needs one entry per layer");
        }
        for a in &self.attention {
            if let AttentionLayout::Windowed { window_tokens } = *a {
                if window_tokens == 0 || window_tokens > self.tokens {
                    return bad("window size must lie in 1..=tokens");
                }
            }
        }
        if self.score_heads.windows(2).any(|w| w[0] >= w[1])
            || self.score_heads.iter().any(|&l| l == 0 || l > self.depth)
        {
            return bad("score-head layers must be strictly increasing within the depth");
        }
        Ok(())
    }

    pub fn full_retention(&self) -> RetentionProfile {
        RetentionProfile {
            tokens: vec![self.tokens; self.depth],
        }
    }
}

/// Tokens entering each layer's attention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RetentionProfile {
    pub tokens: Vec<usize>,
}

impl RetentionProfile {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    pub fn from_trace<T: Real>(trace: &ForwardTrace<T>) -> Self {
        Self {
            tokens: trace.token_counts.clone(),
        }
    }

    /// Pruning before layer `l` (1-based) keeps `counts[k]` tokens from
    /// layer `layers[k]` onwards.
    pub fn from_stages(total: usize, depth: usize, layers: &[usize], counts: &[usize]) -> Self {
        let mut tokens = vec![total; depth];
        for (&l, &c) in layers.iter().zip(counts) {
            for t in tokens.iter_mut().skip(l - 1) {
                *t = c;
            }
        }
        Self { tokens }
    }

    fn validate(&self, spec: &ArchSpec) -> Result<()> {
        if self.tokens.len() != spec.depth {
            return Err(FlopsError::ProfileLength {
                found: self.tokens.len(),
                depth: spec.depth,
            });
        }
        if self.tokens.iter().any(|&n| n == 0 || n > spec.tokens) {
            return Err(FlopsError::Profile(format!(
                "entries must lie in 1..={}",
                spec.tokens
            )));
        }
        if self.tokens.windows(2).any(|w| w[1] > w[0]) {
            return Err(FlopsError::Profile("entries must not increase with depth".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Embed,
    ScoreHead,
    Projections,
    Attention,
    Decoder,
}

impl CostKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CostKind::Embed => "embed",
            CostKind::ScoreHead => "score_head",
            CostKind::Projections => "projections",
            CostKind::Attention => "attention",
            CostKind::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    /// 1-based encoder layer; `None` for embedding and decoder.
    pub layer: Option<usize>,
    pub kind: CostKind,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub entries: Vec<CostEntry>,
    pub embed: u64,
    pub score_heads: u64,
    pub projections: u64,
    pub attention: u64,
    pub decoder: u64,
    pub total: u64,
    /// Unpruned total of the same architecture.
    pub baseline: u64,
    /// `100 * (1 - total / baseline)`.
    pub reduction_pct: f64,
}

impl FlopReport {
    pub fn gmacs(&self) -> f64 {
        self.total as f64 / 1e9
    }

    /// Columns `layer,kind,macs,cumulative,reduction_pct`; the reduction is
    /// reported on the closing `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,macs,cumulative,reduction_pct\n");
        let mut cum = 0u64;
        for e in &self.entries {
            cum += e.macs;
            let layer = e.layer.map(|l| l.to_string()).unwrap_or_default();
            writeln!(s, "{layer},{},{},{cum},", e.kind.as_str(), e.macs).expect("string");
        }
        writeln!(s, ",total,{},{},{:.4}", self.total, self.total, self.reduction_pct).expect("string");
        s
    }
}

fn totals(spec: &ArchSpec, ret: &RetentionProfile) -> Vec<CostEntry> {
    let c = spec.channels as u64;
    let big_n = spec.tokens as u64;
    let p2 = (spec.patch_size * spec.patch_size) as u64;
    let mut entries = vec![CostEntry {
        layer: None,
        kind: CostKind::Embed,
        macs: big_n * c * p2 * spec.in_channels as u64,
    }];
    for l in 0..spec.depth {
        let n = ret.tokens[l] as u64;
        if spec.score_heads.contains(&(l + 1)) {
            let n_in = if l == 0 { big_n } else { ret.tokens[l - 1] as u64 };
            entries.push(CostEntry {
                layer: Some(l + 1),
                kind: CostKind::ScoreHead,
                macs: n_in * c,
            });
        }
        entries.push(CostEntry {
            layer: Some(l + 1),
            kind: CostKind::Projections,
            macs: (4 + 2 * spec.mlp_ratio as u64) * n * c * c,
        });
        let partners = match spec.attention[l] {
            AttentionLayout::Global => n,
            AttentionLayout::Windowed { window_tokens } => (window_tokens as u64).min(n),
        };
        entries.push(CostEntry {
            layer: Some(l + 1),
            kind: CostKind::Attention,
            macs: 2 * n * partners * c,
        });
    }
    let d = spec.decoder;
    let (k, ds, dh, o) = (
        d.taps as u64,
        d.stage_channels as u64,
        d.hidden as u64,
        d.outputs_per_token as u64,
    );
    entries.push(CostEntry {
        layer: None,
        kind: CostKind::Decoder,
        macs: k * big_n * c * ds + big_n * k * ds * dh + big_n * dh * o,
    });
    entries
}

fn report(entries: Vec<CostEntry>, baseline: u64) -> FlopReport {
    let sum = |kind: CostKind| entries.iter().filter(|e| e.kind == kind).map(|e| e.macs).sum();
    let total = entries.iter().map(|e| e.macs).sum();
    FlopReport {
        embed: sum(CostKind::Embed),
        score_heads: sum(CostKind::ScoreHead),
        projections: sum(CostKind::Projections),
        attention: sum(CostKind::Attention),
        decoder: sum(CostKind::Decoder),
        total,
        baseline,
        reduction_pct: if baseline == 0 {
            0.0
        } else {
            100.0 * (1.0 - total as f64 / baseline as f64)
        },
        entries,
    }
}

/// Per-layer MACs for `spec` when layer `l` attends over `ret.tokens[l]`
/// tokens. The reduction is measured against full retention.
pub fn analytic_macs(spec: &ArchSpec, ret: &RetentionProfile) -> Result<FlopReport> {
    spec.validate()?;
    ret.validate(spec)?;
    let baseline = totals(spec, &spec.full_retention()).iter().map(|e| e.macs).sum();
    Ok(report(totals(spec, ret), baseline))
}

/// [`analytic_macs`]; the report's `reduction_pct` compares against the
/// unpruned encoder.
pub fn reduction_report(spec: &ArchSpec, ret: &RetentionProfile) -> Result<FlopReport> {
    analytic_macs(spec, ret)
}

/// Per-image, per-stage score-head outputs from unpruned passes, used to
/// predict what a schedule would retain.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreStats {
    /// `scores[image][stage][token]`, tokens in original grid order.
    pub scores: Vec<Vec<Vec<f64>>>,
}

impl ScoreStats {
    /// Collects scores from traces of unpruned forward passes.
    pub fn from_traces<T: Real>(traces: &[ForwardTrace<T>]) -> Self {
        Self {
            scores: traces
                .iter()
                .map(|t| t.stages.iter().map(|s| s.scores.values().to_vec()).collect())
                .collect(),
        }
    }

    /// Tokens surviving every stage up to and including each one, per image:
    /// a token survives stage `s` iff it survived stage `s - 1` and its score
    /// at stage `s` reaches that stage's threshold. At least one token (the
    /// best scoring survivor) is always kept.
    pub fn survivors(&self, thresholds: &[f64]) -> Vec<Vec<usize>> {
        self.scores
            .iter()
            .map(|stages| {
                let n = stages.first().map_or(0, Vec::len);
                let mut alive = vec![true; n];
                let mut counts = Vec::with_capacity(thresholds.len());
                for (s, &alpha) in thresholds.iter().enumerate() {
                    let sc = &stages[s];
                    let next: Vec<bool> = (0..n).map(|i| alive[i] && sc[i] >= alpha).collect();
                    if next.iter().any(|&b| b) {
                        alive = next;
                    } else {
                        let best = (0..n)
                            .filter(|&i| alive[i])
                            .fold(None, |b: Option<usize>, i| match b {
                                Some(j) if sc[j] >= sc[i] => Some(j),
                                _ => Some(i),
                            });
                        alive = vec![false; n];
                        if let Some(b) = best {
                            alive[b] = true;
                        }
                    }
                    counts.push(alive.iter().filter(|&&b| b).count());
                }
                counts
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub thresholds: Vec<f64>,
    /// Mean MACs over the images in the score statistics.
    pub macs: f64,
    pub reduction_pct: f64,
}

/// Predicted mean cost of each schedule from empirical score statistics.
pub fn sweep_schedules(
    spec: &ArchSpec,
    stats: &ScoreStats,
    schedules: &[PruneSchedule],
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let baseline = analytic_macs(spec, &spec.full_retention())?.total as f64;
    let mut rows = Vec::with_capacity(schedules.len());
    for sched in schedules {
        validate_schedule(sched, spec.depth).map_err(PruneError::from)?;
        if sched.layers() != spec.score_heads {
            return Err(FlopsError::Spec(format!(
                "schedule layers {:?} differ from score-head layers {:?}",
                sched.layers(),
                spec.score_heads
            )));
        }
        let survivors = stats.survivors(&sched.thresholds());
        if survivors.is_empty() {
            return Err(FlopsError::Profile("score statistics are empty".into()));
        }
        let mut sum = 0.0;
        for counts in &survivors {
            let ret = RetentionProfile::from_stages(spec.tokens, spec.depth, &sched.layers(), counts);
            sum += analytic_macs(spec, &ret)?.total as f64;
        }
        let macs = sum / survivors.len() as f64;
        rows.push(SweepRow {
            thresholds: sched.thresholds(),
            macs,
            reduction_pct: 100.0 * (1.0 - macs / baseline),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_b_breakdown() {
        let spec = ArchSpec::vit_b();
        let r = analytic_macs(&spec, &spec.full_retention()).unwrap();
        assert_eq!(r.embed, 4096 * 768 * 256 * 3);
        assert_eq!(r.projections, 12 * 12 * 4096 * 768 * 768);
        assert_eq!(r.attention, 12 * 2 * 4096 * 4096 * 768);
        assert_eq!(r.total, r.embed + r.projections + r.attention + r.decoder);
        assert_eq!(r.reduction_pct, 0.0);
    }

    #[test]
    fn zero_depth_is_embed_plus_decoder() {
        let spec = ArchSpec {
            depth: 0,
            attention: vec![],
            ..ArchSpec::vit_b()
        };
        let r = analytic_macs(&spec, &RetentionProfile::new(vec![])).unwrap();
        assert_eq!(r.total, r.embed + r.decoder);
    }

    #[test]
    fn windowed_attention() {
        let mut spec = ArchSpec::vit_b();
        spec.attention[0] = AttentionLayout::Windowed { window_tokens: 196 };
        let r = analytic_macs(&spec, &spec.full_retention()).unwrap();
        let first = r.entries.iter().find(|e| e.layer == Some(1) && e.kind == CostKind::Attention).unwrap();
        assert_eq!(first.macs, 2 * 4096 * 196 * 768);
    }

    #[test]
    fn profile_errors() {
        let spec = ArchSpec::vit_b();
        assert!(matches!(
            analytic_macs(&spec, &RetentionProfile::new(vec![4096; 3])),
            Err(FlopsError::ProfileLength { .. })
        ));
        let mut up = vec![2048; 12];
        up[5] = 4000;
        assert!(analytic_macs(&spec, &RetentionProfile::new(up)).is_err());
    }

    #[test]
    fn survivors_chain() {
        let stats = ScoreStats {
            scores: vec![vec![vec![0.1, 0.5, 0.9, 0.6], vec![0.9, 0.2, 0.8, 0.1]]],
        };
        assert_eq!(stats.survivors(&[0.5, 0.5]), vec![vec![3, 1]]);
        assert_eq!(stats.survivors(&[0.95, 0.95]), vec![vec![1, 1]]);
    }

    #[test]
    fn csv_shape() {
        let spec = ArchSpec::vit_b();
        let csv = analytic_macs(&spec, &spec.full_retention()).unwrap().to_csv();
        assert!(csv.starts_with("layer,kind,macs,cumulative,reduction_pct\n"));
        assert_eq!(csv.lines().count(), 1 + 1 + 24 + 1 + 1);
    }
}
