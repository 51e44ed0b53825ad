//! Images, binary edge maps, NetPBM I/O, and a deterministic synthetic
//! edge-detection dataset.

mod dataset;
mod pnm;
mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use dataset::{read_manifest, read_split, write_dataset, Manifest};
pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm, Pnm, PnmKind};
pub use synth::{generate, generate_splits, render, Scene, Shape, ShapeMix, SynthSpec};

use crate::eval::GroundTruthSet;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed image: {0}")]
    Format(String),
    #[error("truncated image payload")]
    Truncated,
    #[error("unsupported magic number {0:?}")]
    UnsupportedMagic(String),
    #[error("{0}: {1}")]
    InFile(String, Box<DataError>),
    #[error("invalid synthetic-data spec: {0}")]
    Spec(String),
    #[error("dataset manifest: {0}")]
    Manifest(String),
}

/// An interleaved `height x width x channels` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if data.len() != height * width * channels {
            return Err(DataError::Format(format!(
                "{} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Format("intensities must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Uniform noise in `[0, 1]`, for tests and benchmarks.
    pub fn random(height: usize, width: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..height * width * channels).map(|_| rng.random::<f32>()).collect();
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Left-right mirror image.
    pub fn flipped(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                for c in 0..self.channels {
                    data.push(self.get(y, x, c));
                }
            }
        }
        Self { data, ..*self }
    }

    pub fn from_pnm(p: &Pnm) -> Result<Self, DataError> {
        if p.kind == PnmKind::Bitmap {
            return Err(DataError::Format("expected a grayscale or colour image".into()));
        }
        Self::new(p.height, p.width, p.kind.channels(), p.normalized())
    }

    /// 8-bit P5 (one channel) or P6 (three channels).
    pub fn to_pnm(&self) -> Result<Pnm, DataError> {
        let kind = match self.channels {
            1 => PnmKind::Gray,
            3 => PnmKind::Rgb,
            c => return Err(DataError::Format(format!("{c}-channel images cannot be stored"))),
        };
        Pnm::from_normalized(kind, self.width, self.height, 255, &self.data)
    }
}

/// A binary `height x width` map (edge pixels are `true`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, DataError> {
        if bits.len() != height * width {
            return Err(DataError::Format(format!(
                "{} bits for a {height}x{width} map",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `(y, x)` of every set pixel in raster order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some((i / self.width, i % self.width)))
            .collect()
    }

    /// Pixelwise OR; `None` if the shapes differ.
    pub fn union(&self, other: &BinaryMap) -> Option<BinaryMap> {
        ((self.height, self.width) == (other.height, other.width)).then(|| BinaryMap {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect(),
        })
    }

    pub fn flipped(&self) -> Self {
        let mut out = Self::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, self.width - 1 - x, self.get(y, x));
            }
        }
        out
    }

    /// Bitmaps map ink to `true`; grayscale maps threshold at half range.
    pub fn from_pnm(p: &Pnm) -> Result<Self, DataError> {
        let bits = match p.kind {
            PnmKind::Bitmap => p.samples.iter().map(|&s| s != 0).collect(),
            PnmKind::Gray => p.samples.iter().map(|&s| 2 * u32::from(s) > u32::from(p.maxval)).collect(),
            PnmKind::Rgb => return Err(DataError::Format("expected a binary map".into())),
        };
        Self::new(p.height, p.width, bits)
    }

    pub fn to_pnm(&self) -> Pnm {
        Pnm {
            kind: PnmKind::Bitmap,
            width: self.width,
            height: self.height,
            maxval: 1,
            samples: self.bits.iter().map(|&b| u16::from(b)).collect(),
        }
    }
}

/// One image with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub gt: GroundTruthSet,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, gt: GroundTruthSet) -> Result<Self, DataError> {
        if (gt.height(), gt.width()) != (image.height(), image.width()) {
            return Err(DataError::Format(format!(
                "ground truth is {}x{}, image is {}x{}",
                gt.height(),
                gt.width(),
                image.height(),
                image.width()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            gt,
        })
    }
}
