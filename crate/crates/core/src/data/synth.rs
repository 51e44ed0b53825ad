//! Seeded synthetic scenes of filled rectangles, ellipses and polylines.
//!
//! Shapes are painted back to front onto a uniform background. A pixel is
//! a ground-truth edge when one of its 4-neighbours belongs to a shape
//! painted earlier (or the background) and the intensity step between the
//! two regions is at least half the minimum contrast. Boundaries are
//! therefore 1 pixel wide and lie on the inside of the upper shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BinaryMap, DataError, Image, Sample};
use crate::eval::GroundTruthSet;

/// Relative frequencies of the shape kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeMix {
    pub rectangles: u32,
    pub ellipses: u32,
    pub polylines: u32,
}

impl Default for ShapeMix {
    fn default() -> Self {
        Self {
            rectangles: 2,
            ellipses: 2,
            polylines: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    /// `(H, W)`.
    pub image_size: (usize, usize),
    pub shapes: ShapeMix,
    /// Inclusive range of shapes per image.
    pub shapes_per_image: (usize, usize),
    /// Range of the intensity step between a shape and the background.
    pub contrast: (f32, f32),
    pub noise_sigma: f32,
    /// 1, or 2 to add a copy of the boundaries shifted by one pixel.
    pub annotators: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            count: 200,
            image_size: (64, 64),
            shapes: ShapeMix::default(),
            shapes_per_image: (2, 4),
            contrast: (0.25, 0.6),
            noise_sigma: 0.03,
            annotators: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Spec(m.into()));
        if self.count == 0 {
            return bad("count must be at least 1");
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return bad("images must be at least 8x8");
        }
        let m = self.shapes;
        if m.rectangles + m.ellipses + m.polylines == 0 {
            return bad("shape mix is empty");
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return bad("shapes per image must be a non-empty range starting at 1 or more");
        }
        let (cmin, cmax) = self.contrast;
        if !(cmin > 0.0 && cmin <= cmax && cmax <= 1.0) {
            return bad("contrast range must satisfy 0 < min <= max <= 1");
        }
        if !(self.noise_sigma >= 0.0) || cmin <= self.noise_sigma {
            return bad("minimum contrast must exceed the noise sigma");
        }
        if !(1..=2).contains(&self.annotators) {
            return bad("annotators must be 1 or 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Axis-aligned, `w x h` pixels with top-left `(x, y)`.
    Rect { x: i64, y: i64, w: i64, h: i64 },
    /// Pixel centres inside the ellipse are filled.
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    /// Bresenham segments through integer vertices.
    Polyline { points: Vec<(i64, i64)> },
}

/// A background intensity and shapes painted in order with their intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: f32,
    pub shapes: Vec<(Shape, f32)>,
}

fn bresenham((x0, y0): (i64, i64), (x1, y1): (i64, i64), mut plot: impl FnMut(i64, i64)) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        plot(x, y);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Rasterises a scene: the noise-free label image (0 is background, shape
/// `k` is `k + 1`) plus the clean intensity image.
fn rasterize(scene: &Scene, h: usize, w: usize) -> (Vec<usize>, Vec<f32>) {
    let mut labels = vec![0usize; h * w];
    let put = |labels: &mut Vec<usize>, x: i64, y: i64, l: usize| {
        if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
            labels[y as usize * w + x as usize] = l;
        }
    };
    for (k, (shape, _)) in scene.shapes.iter().enumerate() {
        let l = k + 1;
        match shape {
            Shape::Rect { x, y, w: rw, h: rh } => {
                for yy in *y..y + rh {
                    for xx in *x..x + rw {
                        put(&mut labels, xx, yy, l);
                    }
                }
            }
            Shape::Ellipse { cx, cy, rx, ry } => {
                for yy in 0..h {
                    for xx in 0..w {
                        let u = (xx as f64 + 0.5 - cx) / rx;
                        let v = (yy as f64 + 0.5 - cy) / ry;
                        if u * u + v * v <= 1.0 {
                            labels[yy * w + xx] = l;
                        }
                    }
                }
            }
            Shape::Polyline { points } => {
                for seg in points.windows(2) {
                    bresenham(seg[0], seg[1], |x, y| put(&mut labels, x, y, l));
                }
            }
        }
    }
    let intensity = |l: usize| {
        if l == 0 {
            scene.background
        } else {
            scene.shapes[l - 1].1
        }
    };
    let clean = labels.iter().map(|&l| intensity(l)).collect();
    (labels, clean)
}

/// Boundary pixels of a labelled scene (see the module documentation).
fn boundaries(labels: &[usize], clean: &[f32], h: usize, w: usize, min_step: f32) -> BinaryMap {
    let mut gt = BinaryMap::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut neighbours = [None; 4];
            if x > 0 {
                neighbours[0] = Some(i - 1);
            }
            if x + 1 < w {
                neighbours[1] = Some(i + 1);
            }
            if y > 0 {
                neighbours[2] = Some(i - w);
            }
            if y + 1 < h {
                neighbours[3] = Some(i + w);
            }
            let edge = neighbours.iter().flatten().any(|&j| {
                labels[j] < labels[i] && (clean[i] - clean[j]).abs() >= min_step
            });
            gt.set(y, x, edge);
        }
    }
    gt
}

fn shifted(map: &BinaryMap, dy: i64, dx: i64) -> BinaryMap {
    let (h, w) = (map.height(), map.width());
    let mut out = BinaryMap::empty(h, w);
    for (y, x) in map.pixels() {
        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
        if (0..h as i64).contains(&ny) && (0..w as i64).contains(&nx) {
            out.set(ny as usize, nx as usize, true);
        }
    }
    out
}

/// Renders a scene with additive Gaussian noise, quantised to 8 bits.
/// Returns the image and its boundary map.
pub fn render(
    scene: &Scene,
    size: (usize, usize),
    min_contrast: f32,
    noise_sigma: f32,
    rng: &mut impl Rng,
) -> (Image, BinaryMap) {
    let (h, w) = size;
    let (labels, clean) = rasterize(scene, h, w);
    let gt = boundaries(&labels, &clean, h, w, min_contrast / 2.0);
    let noise = Normal::new(0.0f32, noise_sigma.max(0.0)).expect("finite sigma");
    let data = clean
        .iter()
        .map(|&v| {
            let n = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            ((v + n).clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
        .collect();
    let image = Image::new(h, w, 1, data).expect("clamped intensities");
    (image, gt)
}

fn pick_kind(mix: &ShapeMix, rng: &mut impl Rng) -> u32 {
    let total = mix.rectangles + mix.ellipses + mix.polylines;
    let r = rng.random_range(0..total);
    if r < mix.rectangles {
        0
    } else if r < mix.rectangles + mix.ellipses {
        1
    } else {
        2
    }
}

fn random_scene(spec: &SynthSpec, rng: &mut impl Rng) -> Scene {
    let (h, w) = spec.image_size;
    let (hi, wi) = (h as i64, w as i64);
    let background = rng.random_range(0.2f32..0.8);
    let n = rng.random_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let step = rng.random_range(spec.contrast.0..=spec.contrast.1);
        let up = if background + step > 1.0 {
            false
        } else if background - step < 0.0 {
            true
        } else {
            rng.random_bool(0.5)
        };
        let value = if up { background + step } else { background - step };
        let shape = match pick_kind(&spec.shapes, rng) {
            0 => {
                let rw = rng.random_range(6..=(wi / 2).max(6));
                let rh = rng.random_range(6..=(hi / 2).max(6));
                Shape::Rect {
                    x: rng.random_range(-2..=(wi - rw + 2)),
                    y: rng.random_range(-2..=(hi - rh + 2)),
                    w: rw,
                    h: rh,
                }
            }
            1 => Shape::Ellipse {
                cx: rng.random_range(0.15..0.85) * w as f64,
                cy: rng.random_range(0.15..0.85) * h as f64,
                rx: rng.random_range(4.0..(w as f64 / 4.0).max(5.0)),
                ry: rng.random_range(4.0..(h as f64 / 4.0).max(5.0)),
            },
            _ => {
                let k = rng.random_range(2..=4);
                Shape::Polyline {
                    points: (0..k)
                        .map(|_| (rng.random_range(2..wi - 2), rng.random_range(2..hi - 2)))
                        .collect(),
                }
            }
        };
        shapes.push((shape, value.clamp(0.0, 1.0)));
    }
    Scene { background, shapes }
}

/// `spec.count` samples with ids `"{seed}-{index:04}"`. Byte-identical for
/// equal specs.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let scene = random_scene(spec, &mut rng);
        let (image, gt0) = render(&scene, spec.image_size, spec.contrast.0, spec.noise_sigma, &mut rng);
        let mut maps = vec![gt0];
        if spec.annotators == 2 {
            let (dy, dx) = [(0, 1), (0, -1), (1, 0), (-1, 0)][rng.random_range(0..4)];
            maps.push(shifted(&maps[0], dy, dx));
        }
        let gt = GroundTruthSet::new(maps).map_err(|e| DataError::Spec(e.to_string()))?;
        out.push(Sample::new(format!("{}-{i:04}", spec.seed), image, gt)?);
    }
    Ok(out)
}

/// Training samples from `spec` and `test_count` held-out samples from an
/// independent seed.
pub fn generate_splits(spec: &SynthSpec, test_count: usize) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    let train = generate(spec)?;
    let test_spec = SynthSpec {
        seed: spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1),
        count: test_count,
        ..spec.clone()
    };
    let test = if test_count == 0 { Vec::new() } else { generate(&test_spec)? };
    Ok((train, test))
}
