use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::prune::{validate_schedule, AttentionScale, PruneSchedule};

/// A decoder input: the recovered output of a pruning stage (1-based) or of
/// the last encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionTap {
    Stage(usize),
    Final,
}

/// Point-wise activation after the fused projection and its normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Sigmoid,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    LayerNorm,
    None,
}

/// How token-grid predictions reach pixel resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// Each token predicts the `p x p` pixel logits of its own patch.
    #[default]
    Unpatchify,
    /// Each token predicts one logit; the `h x w` logit grid is resized
    /// bilinearly to `H x W`.
    Bilinear,
}

/// Architecture of the edge detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SedConfig {
    /// `(H, W)` in pixels.
    pub image_size: (usize, usize),
    pub in_channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub schedule: PruneSchedule,
    pub fusion: Vec<FusionTap>,
    /// Width of each per-tap linear projection.
    pub stage_channels: usize,
    /// Width of the fused projection.
    pub decoder_hidden: usize,
    pub activation: Activation,
    pub norm: Norm,
    pub upsample: Upsample,
    pub attention_scale: AttentionScale,
    /// Whether the score heads carry a bias term.
    pub score_bias: bool,
    pub ln_eps: f64,
}

impl Default for SedConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl SedConfig {
    /// 64x64 grayscale input, 8-pixel patches, 6 layers of width 64, pruning
    /// before layers 2 and 4, GELU after the fused projection.
    pub fn micro() -> Self {
        Self {
            image_size: (64, 64),
            in_channels: 1,
            patch_size: 8,
            depth: 6,
            channels: 64,
            heads: 4,
            mlp_ratio: 4,
            schedule: PruneSchedule::new(&[(2, 0.3), (4, 0.5)]),
            fusion: vec![FusionTap::Stage(1), FusionTap::Stage(2), FusionTap::Final],
            stage_channels: 64,
            decoder_hidden: 64,
            activation: Activation::Gelu,
            norm: Norm::LayerNorm,
            upsample: Upsample::Unpatchify,
            attention_scale: AttentionScale::PerHead,
            score_bias: true,
            ln_eps: 1e-6,
        }
    }

    /// [`SedConfig::micro`] with three pruning stages (layers 2, 3 and 5).
    pub fn micro_three_stage() -> Self {
        Self {
            schedule: PruneSchedule::new(&[(2, 0.3), (3, 0.4), (5, 0.5)]),
            fusion: vec![
                FusionTap::Stage(1),
                FusionTap::Stage(2),
                FusionTap::Stage(3),
                FusionTap::Final,
            ],
            ..Self::micro()
        }
    }

    /// Token grid `(h, w)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.patch_size,
            self.image_size.1 / self.patch_size,
        )
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    /// Logits each token emits in the decoder's classifier.
    pub fn outputs_per_token(&self) -> usize {
        match self.upsample {
            Upsample::Unpatchify => self.patch_size * self.patch_size,
            Upsample::Bilinear => 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let (h, w) = self.image_size;
        if self.patch_size == 0 || h == 0 || w == 0 || self.in_channels == 0 {
            return bad("image size, channels and patch size must be positive".into());
        }
        if h % self.patch_size != 0 || w % self.patch_size != 0 {
            return bad(format!(
                "image {h}x{w} not divisible by patch size {}",
                self.patch_size
            ));
        }
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.heads
            ));
        }
        if self.mlp_ratio == 0 || self.stage_channels == 0 || self.decoder_hidden == 0 {
            return bad("mlp ratio and decoder widths must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("layer-norm epsilon must be positive".into());
        }
        validate_schedule(&self.schedule, self.depth).map_err(crate::prune::PruneError::from)?;
        if self.fusion.is_empty() {
            return bad("fusion set is empty".into());
        }
        for (i, tap) in self.fusion.iter().enumerate() {
            if let FusionTap::Stage(s) = *tap {
                if s == 0 || s > self.schedule.len() {
                    return Err(ModelError::MissingStage(format!(
                        "fusion tap {} names stage {s}, schedule has {}",
                        i + 1,
                        self.schedule.len()
                    )));
                }
            }
            if self.fusion[..i].contains(tap) {
                return bad(format!("fusion tap {tap:?} listed twice"));
            }
        }
        if self.fusion.contains(&FusionTap::Final) && self.depth == 0 {
            return bad("final-layer tap needs at least one layer".into());
        }
        Ok(())
    }
}
