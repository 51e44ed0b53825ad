use super::ThinnedEdgeMap;
use crate::model::EdgeMap;

/// Default dominance factor: a pixel must exceed both neighbours by 1%.
pub const NMS_DOMINANCE: f64 = 1.01;

fn clamp_get(v: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    v[y * w + x]
}

/// Separable Gaussian blur (sigma 1, radius 3) with clamped borders.
pub(crate) fn gaussian_smooth(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let taps: Vec<f64> = (-3i32..=3).map(|d| (-(d * d) as f64 / 2.0).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-3isize..=3)
                .zip(&taps)
                .map(|(d, t)| t * clamp_get(v, h, w, y as isize, x as isize + d))
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-3isize..=3)
                .zip(&taps)
                .map(|(d, t)| t * clamp_get(&tmp, h, w, y as isize + d, x as isize))
                .sum::<f64>()
                / norm;
        }
    }
    out
}

fn bilinear_sample(v: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = v[y0 * w + x0] * (1.0 - fx) + v[y0 * w + x1] * fx;
    let bottom = v[y1 * w + x0] * (1.0 - fx) + v[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Angle (radians, image x to the right, y down) across the local ridge of
/// every pixel, from the Hessian of the smoothed map.
pub(crate) fn normal_angles(map: &EdgeMap) -> Vec<f64> {
    let (h, w) = (map.height(), map.width());
    let s = gaussian_smooth(map.values(), h, w);
    let at = |y: usize, x: usize, dy: isize, dx: isize| {
        clamp_get(&s, h, w, y as isize + dy, x as isize + dx)
    };
    let mut angles = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let c = at(y, x, 0, 0);
            let hxx = at(y, x, 0, 1) - 2.0 * c + at(y, x, 0, -1);
            let hyy = at(y, x, 1, 0) - 2.0 * c + at(y, x, -1, 0);
            let hxy = (at(y, x, 1, 1) - at(y, x, 1, -1) - at(y, x, -1, 1) + at(y, x, -1, -1)) / 4.0;
            let along = 0.5 * (2.0 * hxy).atan2(hxx - hyy);
            angles.push(along + std::f64::consts::FRAC_PI_2);
        }
    }
    angles
}

/// Oriented non-maximum suppression with a custom dominance factor.
pub fn nms_with_factor(map: &EdgeMap, factor: f64) -> ThinnedEdgeMap {
    let (h, w) = (map.height(), map.width());
    let v = map.values();
    let angles = normal_angles(map);
    let values = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let (dx, dy) = (angles[i].cos(), angles[i].sin());
            let a = bilinear_sample(v, h, w, y + dy, x + dx);
            let b = bilinear_sample(v, h, w, y - dy, x - dx);
            if v[i] > 0.0 && v[i] >= factor * a && v[i] >= factor * b {
                v[i]
            } else {
                0.0
            }
        })
        .collect();
    ThinnedEdgeMap::new(h, w, values)
}

/// Keeps a pixel iff it is at least [`NMS_DOMINANCE`] times both bilinearly
/// interpolated neighbours one pixel away on either side, measured across
/// the local edge direction. All other pixels become exactly zero.
pub fn nms(map: &EdgeMap) -> ThinnedEdgeMap {
    nms_with_factor(map, NMS_DOMINANCE)
}
