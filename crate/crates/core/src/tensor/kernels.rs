use super::{Matrix, Real, Result, TensorError};

fn shape_err(op: &'static str, a: &Matrix<impl Real>, b: &Matrix<impl Real>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

/// `a · b`. For each output element the products are summed in ascending
/// inner-index order.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(shape_err("matmul", a, b));
    }
    let (m, n) = (a.rows(), b.cols());
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            let brow = &bd[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Matrix::new(m, n, out)?.ensure_finite("matmul")
}

/// `a · bᵀ` without materialising the transpose by the caller.
pub fn matmul_a_bt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(shape_err("matmul_a_bt", a, b));
    }
    matmul(a, &b.transpose())
}

/// `aᵀ · b`.
pub fn matmul_at_b<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows() != b.rows() {
        return Err(shape_err("matmul_at_b", a, b));
    }
    let (k, n) = (a.cols(), b.cols());
    let mut out = vec![T::zero(); k * n];
    for i in 0..a.rows() {
        let brow = b.row(i);
        for (kk, &aik) in a.row(i).iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Matrix::new(k, n, out)?.ensure_finite("matmul_at_b")
}

pub fn add<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Matrix::new(a.rows(), a.cols(), data)?.ensure_finite("add")
}

/// Adds a `1 x cols` row to every row of `a`.
pub fn add_row<T: Real>(a: &Matrix<T>, row: &Matrix<T>) -> Result<Matrix<T>> {
    if row.rows() != 1 || row.cols() != a.cols() {
        return Err(shape_err("add_row", a, row));
    }
    let mut out = a.clone();
    let r = row.data();
    for i in 0..out.rows() {
        for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
            *o += b;
        }
    }
    out.ensure_finite("add_row")
}

pub fn column_sums<T: Real>(a: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, a.cols());
    for i in 0..a.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    out
}

/// Softmax of each row, shifted by the row maximum.
pub fn row_softmax<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = a.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out.ensure_finite("row_softmax")
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Per-row statistics kept for the layer-norm adjoint.
#[derive(Debug, Clone)]
pub struct LayerNormStats<T> {
    pub normalized: Matrix<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Real>(
    a: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
    eps: T,
) -> Result<Matrix<T>> {
    layer_norm_with_stats(a, gain, bias, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_stats<T: Real>(
    a: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
    eps: T,
) -> Result<(Matrix<T>, LayerNormStats<T>)> {
    if gain.len() != a.cols() || bias.len() != a.cols() {
        return Err(shape_err("layer_norm", a, gain));
    }
    if eps.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(TensorError::InvalidArgument {
            op: "layer_norm",
            reason: "eps must be positive".into(),
        });
    }
    let c = T::from_usize(a.cols()).unwrap_or_else(T::one);
    let mut normalized = a.clone();
    let mut out = a.clone();
    let mut inv_std = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let row = a.row(i);
        let mean = row.iter().copied().sum::<T>() / c;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / c;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std.push(rstd);
        let nrow = normalized.row_mut(i);
        for (n, &x) in nrow.iter_mut().zip(row) {
            *n = (x - mean) * rstd;
        }
        let nrow = normalized.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = nrow[j] * gain.data()[j] + bias.data()[j];
        }
    }
    let out = out.ensure_finite("layer_norm")?;
    Ok((
        out,
        LayerNormStats {
            normalized,
            inv_std,
        },
    ))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    a.map(|x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()))
        .ensure_finite("gelu")
}

/// Elementwise `d gelu(x) / dx * upstream`.
pub fn gelu_grad<T: Real>(x: &Matrix<T>, upstream: &Matrix<T>) -> Result<Matrix<T>> {
    if x.shape() != upstream.shape() {
        return Err(shape_err("gelu_grad", x, upstream));
    }
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| {
            let t = (k * (x + c * x * x * x)).tanh();
            let d = half * (T::one() + t)
                + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x);
            d * g
        })
        .collect();
    Matrix::new(x.rows(), x.cols(), data)?.ensure_finite("gelu_grad")
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    a.map(sigmoid_scalar).ensure_finite("sigmoid")
}

/// Softmax probabilities of every head, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    pub probs: Vec<Matrix<T>>,
}

fn head_slice<T: Real>(qkv: &Matrix<T>, which: usize, head: usize, dh: usize) -> Matrix<T> {
    let c = qkv.cols() / 3;
    qkv.slice_cols(which * c + head * dh, dh)
}

/// Multi-head scaled dot-product attention over all rows of `qkv`, whose
/// columns hold `[Q | K | V]` each of width `C`. Returns the concatenated
/// head outputs (`rows x C`).
pub fn attention<T: Real>(
    qkv: &Matrix<T>,
    heads: usize,
    scale: T,
) -> Result<(Matrix<T>, AttentionCache<T>)> {
    if heads == 0 || qkv.cols() % (3 * heads) != 0 {
        return Err(TensorError::InvalidArgument {
            op: "attention",
            reason: format!("{} qkv columns not divisible into {heads} heads", qkv.cols()),
        });
    }
    let n = qkv.rows();
    let c = qkv.cols() / 3;
    let dh = c / heads;
    let mut out = Matrix::zeros(n, c);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = head_slice(qkv, 0, h, dh);
        let k = head_slice(qkv, 1, h, dh);
        let v = head_slice(qkv, 2, h, dh);
        let logits = matmul_a_bt(&q, &k)?.scale(scale);
        let p = row_softmax(&logits)?;
        let o = matmul(&p, &v)?;
        for i in 0..n {
            out.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(o.row(i));
        }
        probs.push(p);
    }
    Ok((out, AttentionCache { probs }))
}

/// Adjoint of [`attention`] with respect to `qkv`.
pub fn attention_backward<T: Real>(
    qkv: &Matrix<T>,
    cache: &AttentionCache<T>,
    heads: usize,
    scale: T,
    upstream: &Matrix<T>,
) -> Result<Matrix<T>> {
    let n = qkv.rows();
    let c = qkv.cols() / 3;
    let dh = c / heads;
    if upstream.shape() != (n, c) || cache.probs.len() != heads {
        return Err(shape_err("attention_backward", qkv, upstream));
    }
    let mut grad = Matrix::zeros(n, 3 * c);
    for h in 0..heads {
        let q = head_slice(qkv, 0, h, dh);
        let k = head_slice(qkv, 1, h, dh);
        let v = head_slice(qkv, 2, h, dh);
        let p = &cache.probs[h];
        let go = upstream.slice_cols(h * dh, dh);
        let gp = matmul_a_bt(&go, &v)?;
        let gv = matmul_at_b(p, &go)?;
        let mut gs = gp;
        for i in 0..n {
            let prow = p.row(i);
            let dot: T = gs.row(i).iter().zip(prow).map(|(&g, &pp)| g * pp).sum();
            for (g, &pp) in gs.row_mut(i).iter_mut().zip(prow) {
                *g = pp * (*g - dot) * scale;
            }
        }
        let gq = matmul(&gs, &k)?;
        let gk = matmul_at_b(&gs, &q)?;
        for i in 0..n {
            let row = grad.row_mut(i);
            row[h * dh..(h + 1) * dh].copy_from_slice(gq.row(i));
            row[c + h * dh..c + (h + 1) * dh].copy_from_slice(gk.row(i));
            row[2 * c + h * dh..2 * c + (h + 1) * dh].copy_from_slice(gv.row(i));
        }
    }
    grad.ensure_finite("attention_backward")
}

/// Source sample position and interpolation weight along one axis
/// (half-pixel centres, i.e. align-corners = false).
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn check_resize<T: Real>(map: &Matrix<T>, out_h: usize, out_w: usize) -> Result<()> {
    if map.rows() == 0 || map.cols() == 0 || out_h == 0 || out_w == 0 {
        return Err(TensorError::InvalidArgument {
            op: "bilinear_resize",
            reason: "all dimensions must be at least 1".into(),
        });
    }
    Ok(())
}

/// Bilinear resize of a `h x w` map to `out_h x out_w`.
pub fn bilinear_resize<T: Real>(map: &Matrix<T>, out_h: usize, out_w: usize) -> Result<Matrix<T>> {
    check_resize(map, out_h, out_w)?;
    let ys = bilinear_taps(out_h, map.rows());
    let xs = bilinear_taps(out_w, map.cols());
    let mut out = Matrix::zeros(out_h, out_w);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        let fy = T::lit(fy);
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let fx = T::lit(fx);
            let top = map.get(y0, x0) * (T::one() - fx) + map.get(y0, x1) * fx;
            let bot = map.get(y1, x0) * (T::one() - fx) + map.get(y1, x1) * fx;
            out.set(oy, ox, top * (T::one() - fy) + bot * fy);
        }
    }
    out.ensure_finite("bilinear_resize")
}

/// Transpose of the linear map implemented by [`bilinear_resize`].
pub fn bilinear_resize_adjoint<T: Real>(
    upstream: &Matrix<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Matrix<T>> {
    let (out_h, out_w) = upstream.shape();
    check_resize(upstream, in_h, in_w)?;
    let ys = bilinear_taps(out_h, in_h);
    let xs = bilinear_taps(out_w, in_w);
    let mut grad = Matrix::zeros(in_h, in_w);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        let fy = T::lit(fy);
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let fx = T::lit(fx);
            let g = upstream.get(oy, ox);
            let gt = g * (T::one() - fy);
            let gb = g * fy;
            let add = |m: &mut Matrix<T>, r: usize, c: usize, v: T| {
                let cur = m.get(r, c);
                m.set(r, c, cur + v);
            };
            add(&mut grad, y0, x0, gt * (T::one() - fx));
            add(&mut grad, y0, x1, gt * fx);
            add(&mut grad, y1, x0, gb * (T::one() - fx));
            add(&mut grad, y1, x1, gb * fx);
        }
    }
    grad.ensure_finite("bilinear_resize_adjoint")
}
