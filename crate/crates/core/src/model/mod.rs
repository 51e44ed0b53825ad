//! The edge detector: patch embedding, a pre-norm transformer encoder with
//! pruning hooks, and a multi-stage linear fusion decoder.
//!
//! All computation is recorded on a [`GradTape`], so the same code path
//! serves inference (tape discarded) and training (tape replayed).

mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Activation, FusionTap, Norm, SedConfig, Upsample};

use crate::data::Image;
use crate::prune::{
    accumulate_mask, decide_retention, AccumulatedMask, DecisionMask, EdgeScores, PruneError,
    StageSnapshot, TokenSequence,
};
use crate::tensor::{GradTape, Matrix, ParamId, ParamStore, Real, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input is {found:?}, model expects {expected:?}")]
    Dimension {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("missing decoder input: {0}")]
    MissingStage(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prune(#[from] PruneError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Which pruning decisions a forward pass applies.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PruneMode {
    /// Score heads still run (their outputs are traced) but nothing is pruned.
    Disabled,
    /// The thresholds of the configured schedule.
    #[default]
    Schedule,
    /// The configured layers with these thresholds, positionally.
    Thresholds(Vec<f64>),
}

/// Pixel-resolution edge probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        if values.len() != height * width {
            return Err(TensorError::InvalidArgument {
                op: "EdgeMap::new",
                reason: format!("{} values for a {height}x{width} map", values.len()),
            });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(TensorError::InvalidArgument {
                op: "EdgeMap::new",
                reason: "probabilities must lie in [0, 1]".into(),
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
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

    /// Largest absolute per-pixel difference; `None` if the shapes differ.
    pub fn max_abs_diff(&self, other: &EdgeMap) -> Option<f64> {
        ((self.height, self.width) == (other.height, other.width)).then(|| {
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
    }
}

/// What one pruning stage saw and decided.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    /// 1-based encoder layer.
    pub layer: usize,
    pub threshold: f64,
    pub scores: EdgeScores,
    /// Original grid position of each scored token.
    pub origin_index: Vec<usize>,
    pub mask: DecisionMask,
    pub accumulated: AccumulatedMask,
}

impl StageTrace {
    pub fn tokens_in(&self) -> usize {
        self.mask.len()
    }

    pub fn retained(&self) -> usize {
        self.mask.retained_count()
    }
}

/// Everything observable about one encoder pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T = f32> {
    pub stages: Vec<StageTrace>,
    /// Tokens entering each layer's attention, one entry per layer.
    pub token_counts: Vec<usize>,
    pub snapshots: Vec<StageSnapshot<T>>,
    /// Full-length recovered sequences, one per configured fusion tap.
    pub recovered: Vec<(FusionTap, TokenSequence<T>)>,
    /// Multiply-accumulates of every matrix product in the pass.
    pub macs: u64,
}

impl<T: Real> ForwardTrace<T> {
    pub fn recovered(&self, tap: FusionTap) -> Option<&TokenSequence<T>> {
        self.recovered
            .iter()
            .find_map(|(t, s)| (*t == tap).then_some(s))
    }
}

/// Handles into a tape produced by [`SedModel::forward_tape`].
#[derive(Debug)]
pub struct TapeForward<T = f32> {
    /// `H x W` pre-sigmoid edge logits.
    pub logits: Var,
    /// Per stage, the `tokens_in x 1` score-head logits.
    pub score_logits: Vec<Var>,
    pub trace: ForwardTrace<T>,
}

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct LayerNormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNormIds,
    qkv: Linear,
    out: Linear,
    ln2: LayerNormIds,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    heads: Vec<Linear>,
    stage_proj: Vec<Linear>,
    proj: Linear,
    norm: Option<LayerNormIds>,
    classifier: Linear,
}

/// Expected parameter names and shapes for a configuration, in store order.
fn param_shapes(cfg: &SedConfig) -> Vec<(String, (usize, usize))> {
    let c = cfg.channels;
    let hidden = cfg.mlp_ratio * c;
    let mut v: Vec<(String, (usize, usize))> = vec![
        ("embed.weight".into(), (cfg.patch_dim(), c)),
        ("embed.bias".into(), (1, c)),
        ("embed.pos".into(), (cfg.tokens(), c)),
    ];
    for i in 0..cfg.depth {
        let p = |s: &str| format!("blocks.{i}.{s}");
        v.extend([
            (p("ln1.gain"), (1, c)),
            (p("ln1.bias"), (1, c)),
            (p("attn.qkv.weight"), (c, 3 * c)),
            (p("attn.qkv.bias"), (1, 3 * c)),
            (p("attn.out.weight"), (c, c)),
            (p("attn.out.bias"), (1, c)),
            (p("ln2.gain"), (1, c)),
            (p("ln2.bias"), (1, c)),
            (p("mlp.fc1.weight"), (c, hidden)),
            (p("mlp.fc1.bias"), (1, hidden)),
            (p("mlp.fc2.weight"), (hidden, c)),
            (p("mlp.fc2.bias"), (1, c)),
        ]);
    }
    for s in 0..cfg.schedule.len() {
        v.push((format!("heads.{s}.weight"), (c, 1)));
        if cfg.score_bias {
            v.push((format!("heads.{s}.bias"), (1, 1)));
        }
    }
    let ds = cfg.stage_channels;
    for k in 0..cfg.fusion.len() {
        v.push((format!("decoder.stage.{k}.weight"), (c, ds)));
        v.push((format!("decoder.stage.{k}.bias"), (1, ds)));
    }
    let dh = cfg.decoder_hidden;
    v.push(("decoder.proj.weight".into(), (cfg.fusion.len() * ds, dh)));
    v.push(("decoder.proj.bias".into(), (1, dh)));
    if cfg.norm == Norm::LayerNorm {
        v.push(("decoder.norm.gain".into(), (1, dh)));
        v.push(("decoder.norm.bias".into(), (1, dh)));
    }
    v.push(("decoder.classifier.weight".into(), (dh, cfg.outputs_per_token())));
    v.push(("decoder.classifier.bias".into(), (1, cfg.outputs_per_token())));
    v
}

impl Layout {
    fn resolve<T: Real>(cfg: &SedConfig, store: &ParamStore<T>) -> Result<Self> {
        for (name, shape) in param_shapes(cfg) {
            let id = store
                .id(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
            let found = store.get(id).shape();
            if found != shape {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name} is {found:?}, expected {shape:?}"
                )));
            }
        }
        if store.len() != param_shapes(cfg).len() {
            return Err(ModelError::Checkpoint(format!(
                "{} parameters present, configuration needs {}",
                store.len(),
                param_shapes(cfg).len()
            )));
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let lin = |p: &str, bias: bool| Linear {
            weight: id(&format!("{p}.weight")),
            bias: bias.then(|| id(&format!("{p}.bias"))),
        };
        let ln = |p: &str| LayerNormIds {
            gain: id(&format!("{p}.gain")),
            bias: id(&format!("{p}.bias")),
        };
        Ok(Self {
            embed: lin("embed", true),
            pos: id("embed.pos"),
            blocks: (0..cfg.depth)
                .map(|i| Block {
                    ln1: ln(&format!("blocks.{i}.ln1")),
                    qkv: lin(&format!("blocks.{i}.attn.qkv"), true),
                    out: lin(&format!("blocks.{i}.attn.out"), true),
                    ln2: ln(&format!("blocks.{i}.ln2")),
                    fc1: lin(&format!("blocks.{i}.mlp.fc1"), true),
                    fc2: lin(&format!("blocks.{i}.mlp.fc2"), true),
                })
                .collect(),
            heads: (0..cfg.schedule.len())
                .map(|s| lin(&format!("heads.{s}"), cfg.score_bias))
                .collect(),
            stage_proj: (0..cfg.fusion.len())
                .map(|k| lin(&format!("decoder.stage.{k}"), true))
                .collect(),
            proj: lin("decoder.proj", true),
            norm: (cfg.norm == Norm::LayerNorm).then(|| ln("decoder.norm")),
            classifier: lin("decoder.classifier", true),
        })
    }
}

/// Model weights bound to their configuration.
#[derive(Debug, Clone)]
pub struct SedModel<T = f32> {
    config: SedConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> SedModel<T> {
    /// Seeded random initialisation: linear weights `N(0, 1/fan_in)`,
    /// positional embedding `N(0, 0.02^2)`, zero biases, unit norm gains,
    /// zero score heads.
    pub fn new(config: SedConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, (r, c)) in param_shapes(&config) {
            let value = if name.ends_with(".gain") {
                Matrix::filled(r, c, T::one())
            } else if name.ends_with(".bias") || name.starts_with("heads.") {
                Matrix::zeros(r, c)
            } else {
                let std = if name == "embed.pos" {
                    0.02
                } else {
                    1.0 / (r as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                Matrix::from_fn(r, c, |_, _| T::lit(normal.sample(&mut rng)))
            };
            params.insert(name, value);
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: SedConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &SedConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> SedModel<U> {
        SedModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Flattened patches, one row per token in raster order; each row lists
    /// `(dy, dx, channel)` in row-major order.
    pub fn patches(&self, image: &Image) -> Result<Matrix<T>> {
        let cfg = &self.config;
        let (hh, ww) = cfg.image_size;
        let found = (image.height(), image.width(), image.channels());
        if found != (hh, ww, cfg.in_channels) {
            return Err(ModelError::Dimension {
                expected: (hh, ww, cfg.in_channels),
                found,
            });
        }
        let p = cfg.patch_size;
        let ch = cfg.in_channels;
        let (_, gw) = cfg.grid();
        Ok(Matrix::from_fn(cfg.tokens(), cfg.patch_dim(), |t, k| {
            let (ty, tx) = (t / gw, t % gw);
            let (dy, rest) = (k / (p * ch), k % (p * ch));
            let (dx, c) = (rest / ch, rest % ch);
            T::lit(f64::from(image.get(ty * p + dy, tx * p + dx, c)))
        }))
    }

    fn embed_on_tape(&self, tape: &mut GradTape<'_, T>, image: &Image) -> Result<Var> {
        let patches = tape.constant(self.patches(image)?);
        let x = tape.linear(patches, self.layout.embed.weight, self.layout.embed.bias)?;
        let pos = tape.param(self.layout.pos);
        Ok(tape.add(x, pos)?)
    }

    /// Linear patch projection plus learned positional embedding.
    pub fn patch_embed(&self, image: &Image) -> Result<TokenSequence<T>> {
        let mut tape = GradTape::new(&self.params);
        let x = self.embed_on_tape(&mut tape, image)?;
        Ok(TokenSequence::new(tape.value(x).clone(), self.config.grid())?)
    }

    fn thresholds(&self, mode: &PruneMode) -> Result<Option<Vec<f64>>> {
        match mode {
            PruneMode::Disabled => Ok(None),
            PruneMode::Schedule => Ok(Some(self.config.schedule.thresholds())),
            PruneMode::Thresholds(t) => {
                let s = self.config.schedule.with_thresholds(t)?;
                crate::prune::validate_schedule(&s, self.config.depth)
                    .map_err(PruneError::from)?;
                Ok(Some(t.clone()))
            }
        }
    }

    fn block_on_tape(&self, tape: &mut GradTape<'_, T>, b: &Block, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let eps = T::lit(cfg.ln_eps);
        let scale = T::lit(cfg.attention_scale.factor(cfg.channels, cfg.heads));
        let h = tape.layer_norm(x, b.ln1.gain, b.ln1.bias, eps)?;
        let qkv = tape.linear(h, b.qkv.weight, b.qkv.bias)?;
        let a = tape.attention(qkv, cfg.heads, scale)?;
        let a = tape.linear(a, b.out.weight, b.out.bias)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, b.ln2.gain, b.ln2.bias, eps)?;
        let h = tape.linear(h, b.fc1.weight, b.fc1.bias)?;
        let h = tape.gelu(h)?;
        let h = tape.linear(h, b.fc2.weight, b.fc2.bias)?;
        Ok(tape.add(x, h)?)
    }

    /// Runs the encoder on full-length tokens `x` and recovers every fusion
    /// tap. Returns the tap variables in configuration order.
    fn encode_on_tape(
        &self,
        tape: &mut GradTape<'_, T>,
        x: Var,
        mode: &PruneMode,
    ) -> Result<(Vec<Var>, Vec<Var>, ForwardTrace<T>)> {
        let cfg = &self.config;
        let grid = cfg.grid();
        let n = cfg.tokens();
        let thresholds = self.thresholds(mode)?;
        let macs_before = tape.macs();

        let mut x = x;
        let mut origin: Vec<usize> = (0..n).collect();
        let mut acc = AccumulatedMask::full(n);
        let mut stages = Vec::new();
        let mut snapshots = Vec::new();
        let mut snapshot_vars = Vec::new();
        let mut score_logits = Vec::new();
        let mut stage_out = Vec::new();
        let mut token_counts = Vec::with_capacity(cfg.depth);

        for (i, block) in self.layout.blocks.iter().enumerate() {
            let layer = i + 1;
            let stage = cfg.schedule.stage_at(layer);
            if let Some(s) = stage {
                let head = &self.layout.heads[s];
                let logits = tape.linear(x, head.weight, head.bias)?;
                score_logits.push(logits);
                let scores = EdgeScores::new(
                    tape.value(logits)
                        .data()
                        .iter()
                        .map(|z| crate::tensor::sigmoid_scalar(*z).to_f64_lossy())
                        .collect(),
                )?;
                let (threshold, mask) = match &thresholds {
                    None => (0.0, DecisionMask::all_retained(scores.len())),
                    Some(t) => (t[s], decide_retention(&scores, t[s])?),
                };
                acc = accumulate_mask(&acc, &mask)?;
                snapshots.push(StageSnapshot {
                    input: TokenSequence::with_origin(
                        tape.value(x).clone(),
                        grid,
                        origin.clone(),
                    )?,
                    mask: mask.clone(),
                });
                snapshot_vars.push(x);
                stages.push(StageTrace {
                    layer,
                    threshold,
                    scores,
                    origin_index: origin.clone(),
                    mask: mask.clone(),
                    accumulated: acc.clone(),
                });
                if !mask.is_all_retained() {
                    let keep = mask.retained_indices();
                    origin = keep.iter().map(|&k| origin[k]).collect();
                    x = tape.gather_rows(x, keep)?;
                }
            }
            token_counts.push(tape.value(x).rows());
            x = self.block_on_tape(tape, block, x)?;
            if stage.is_some() {
                stage_out.push(x);
            }
        }

        let mut taps = Vec::with_capacity(cfg.fusion.len());
        let mut recovered = Vec::with_capacity(cfg.fusion.len());
        for &tap in &cfg.fusion {
            let (mut z, depth) = match tap {
                FusionTap::Stage(s) => (stage_out[s - 1], s),
                FusionTap::Final => (x, snapshots.len()),
            };
            for t in (0..depth).rev() {
                let mask = &snapshots[t].mask;
                if !mask.is_all_retained() {
                    z = tape.scatter_rows(snapshot_vars[t], z, mask.retained_indices())?;
                }
            }
            recovered.push((tap, TokenSequence::new(tape.value(z).clone(), grid)?));
            taps.push(z);
        }

        let trace = ForwardTrace {
            stages,
            token_counts,
            snapshots,
            recovered,
            macs: tape.macs() - macs_before,
        };
        Ok((taps, score_logits, trace))
    }

    /// Fusion decoder on full-length tap sequences; returns `H x W` logits.
    fn decode_on_tape(&self, tape: &mut GradTape<'_, T>, taps: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        let mut projected = Vec::with_capacity(taps.len());
        for (&z, lin) in taps.iter().zip(&self.layout.stage_proj) {
            projected.push(tape.linear(z, lin.weight, lin.bias)?);
        }
        let fused = tape.concat_cols(&projected)?;
        let mut h = tape.linear(fused, self.layout.proj.weight, self.layout.proj.bias)?;
        if let Some(norm) = &self.layout.norm {
            h = tape.layer_norm(h, norm.gain, norm.bias, T::lit(cfg.ln_eps))?;
        }
        h = match cfg.activation {
            Activation::Sigmoid => tape.sigmoid(h)?,
            Activation::Gelu => tape.gelu(h)?,
        };
        let cls = &self.layout.classifier;
        let token_logits = tape.linear(h, cls.weight, cls.bias)?;
        let (hh, ww) = cfg.image_size;
        let (gh, gw) = cfg.grid();
        let p = cfg.patch_size;
        Ok(match cfg.upsample {
            Upsample::Unpatchify => {
                let map = (0..hh * ww)
                    .map(|j| {
                        let (y, x) = (j / ww, j % ww);
                        ((y / p) * gw + x / p) * p * p + (y % p) * p + x % p
                    })
                    .collect();
                tape.permute(token_logits, hh, ww, map)?
            }
            Upsample::Bilinear => {
                let grid_map = tape.permute(token_logits, gh, gw, (0..gh * gw).collect())?;
                tape.bilinear_resize(grid_map, hh, ww)?
            }
        })
    }

    /// Full forward pass recorded on `tape`.
    pub fn forward_tape(
        &self,
        tape: &mut GradTape<'_, T>,
        image: &Image,
        mode: &PruneMode,
    ) -> Result<TapeForward<T>> {
        let macs_before = tape.macs();
        let x = self.embed_on_tape(tape, image)?;
        let (taps, score_logits, mut trace) = self.encode_on_tape(tape, x, mode)?;
        let logits = self.decode_on_tape(tape, &taps)?;
        trace.macs = tape.macs() - macs_before;
        Ok(TapeForward {
            logits,
            score_logits,
            trace,
        })
    }

    /// Inference: edge probabilities and the encoder trace. The trace's MAC
    /// count covers embedding, score heads, encoder and decoder.
    pub fn forward(&self, image: &Image, mode: &PruneMode) -> Result<(EdgeMap, ForwardTrace<T>)> {
        let mut tape = GradTape::new(&self.params);
        let out = self.forward_tape(&mut tape, image, mode)?;
        let map = logits_to_edge_map(tape.value(out.logits));
        Ok((map, out.trace))
    }

    /// Encoder only, from already-embedded full-length tokens. The trace's MAC
    /// count covers score heads and encoder layers.
    pub fn encode(&self, tokens: &TokenSequence<T>, mode: &PruneMode) -> Result<ForwardTrace<T>> {
        if tokens.tokens() != self.config.tokens() || tokens.channels() != self.config.channels {
            return Err(ModelError::Config(format!(
                "encoder expects {}x{} tokens, got {}x{}",
                self.config.tokens(),
                self.config.channels,
                tokens.tokens(),
                tokens.channels()
            )));
        }
        let mut tape = GradTape::new(&self.params);
        let x = tape.constant(tokens.features().clone());
        let (_, _, trace) = self.encode_on_tape(&mut tape, x, mode)?;
        Ok(trace)
    }

    /// Decoder only, from the recovered sequences of `trace`.
    pub fn decode(&self, trace: &ForwardTrace<T>) -> Result<EdgeMap> {
        let mut tape = GradTape::new(&self.params);
        let mut taps = Vec::with_capacity(self.config.fusion.len());
        for &tap in &self.config.fusion {
            let seq = trace
                .recovered(tap)
                .ok_or_else(|| ModelError::MissingStage(format!("{tap:?} not in trace")))?;
            if seq.tokens() != self.config.tokens() {
                return Err(ModelError::MissingStage(format!(
                    "{tap:?} has {} tokens, expected full length {}",
                    seq.tokens(),
                    self.config.tokens()
                )));
            }
            taps.push(tape.constant(seq.features().clone()));
        }
        let logits = self.decode_on_tape(&mut tape, &taps)?;
        Ok(logits_to_edge_map(tape.value(logits)))
    }
}

/// Applies the logistic function to an `H x W` logit matrix.
pub fn logits_to_edge_map<T: Real>(logits: &Matrix<T>) -> EdgeMap {
    let values = logits
        .data()
        .iter()
        .map(|&z| crate::tensor::sigmoid_scalar(z.to_f64_lossy()))
        .collect();
    EdgeMap::new(logits.rows(), logits.cols(), values).expect("sigmoid lies in [0, 1]")
}
