//! Reverse-mode gradient tape.
//!
//! Ops are appended in execution order; [`GradTape::backward`] replays their
//! adjoints in exact reverse order and accumulates parameter gradients into a
//! [`Gradients`] buffer shaped like the [`ParamStore`]. The tape also counts
//! multiply-accumulates of every matrix product it records.

use serde::{Deserialize, Serialize};

use super::kernels::{self, sigmoid_scalar, AttentionCache, LayerNormStats};
use super::{Matrix, Real, Result, TensorError};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter matrices in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
        }
    }
}

/// Accumulated parameter gradients, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    values: Vec<Matrix<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            values: store
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.values.iter().enumerate().map(|(i, m)| (ParamId(i), m))
    }

    /// Adds `other` elementwise; both must come from the same store layout.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(TensorError::Tape(format!(
                "gradient sets have {} and {} parameters",
                self.values.len(),
                other.values.len()
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "Gradients::accumulate",
                    left: a.shape(),
                    right: b.shape(),
                });
            }
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for m in &mut self.values {
            for x in m.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.values
            .iter()
            .flat_map(|m| m.data().iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: LayerNormStats<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Attention {
        qkv: Var,
        heads: usize,
        scale: T,
        cache: AttentionCache<T>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Scatter {
        base: Var,
        src: Var,
        indices: Vec<usize>,
    },
    Concat(Vec<Var>),
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Bilinear {
        x: Var,
    },
    Bce {
        logits: Var,
        targets: Vec<bool>,
        beta: T,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Option<Matrix<T>>,
    op: Op<T>,
}

/// Probability clamp used by the cross-entropy op, expressed as a logit bound.
pub(crate) const BCE_PROB_EPS: f64 = 1e-6;

fn bce_logit_bound() -> f64 {
    ((1.0 - BCE_PROB_EPS) / BCE_PROB_EPS).ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// One forward computation recorded against a borrowed parameter store.
pub struct GradTape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    macs: u64,
}

impl<'p, T: Real> GradTape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            macs: 0,
        }
    }

    /// Multiply-accumulates performed by the matrix products recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = kernels::matmul(va, vb)?;
        self.macs += (va.rows() * va.cols() * vb.cols()) as u64;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = kernels::add_row(self.value(a), self.value(row))?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let w = self.param(w);
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let b = self.param(b);
                self.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId, eps: T) -> Result<Var> {
        let (g, b) = (self.param(gain), self.param(bias));
        let (out, stats) =
            kernels::layer_norm_with_stats(self.value(x), self.value(g), self.value(b), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain: g,
                bias: b,
                stats,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::gelu(self.value(x))?;
        Ok(self.push(out, Op::Gelu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = kernels::sigmoid(self.value(x))?;
        Ok(self.push(out, Op::Sigmoid(x)))
    }

    /// Multi-head attention over all rows of a `[Q | K | V]` matrix.
    pub fn attention(&mut self, qkv: Var, heads: usize, scale: T) -> Result<Var> {
        let v = self.value(qkv);
        let (n, c) = (v.rows(), v.cols() / 3);
        let (out, cache) = kernels::attention(v, heads, scale)?;
        self.macs += (2 * n * n * c) as u64;
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                heads,
                scale,
                cache,
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let out = self.value(x).gather_rows(&indices)?;
        Ok(self.push(out, Op::Gather { x, indices }))
    }

    /// Copy of `base` with row `indices[k]` replaced by row `k` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, indices: Vec<usize>) -> Result<Var> {
        let mut out = self.value(base).clone();
        out.scatter_rows(&indices, self.value(src))?;
        Ok(self.push(out, Op::Scatter { base, src, indices }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_cols(&mats)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Rearranges elements: `out.data[j] = x.data[map[j]]`, shaped `rows x cols`.
    pub fn permute(&mut self, x: Var, rows: usize, cols: usize, map: Vec<usize>) -> Result<Var> {
        let src = self.value(x);
        if map.len() != rows * cols || map.iter().any(|&i| i >= src.len()) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: "index map does not fit the source".into(),
            });
        }
        let data = map.iter().map(|&i| src.data()[i]).collect();
        let out = Matrix::new(rows, cols, data)?;
        Ok(self.push(out, Op::Permute { x, map }))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(out, Op::Bilinear { x }))
    }

    /// Weighted binary cross-entropy on logits, summed over elements:
    /// `-beta * sum_{y=1} log p - (1 - beta) * sum_{y=0} log(1 - p)` with
    /// `p = sigmoid(z)` clamped to `[1e-6, 1 - 1e-6]`.
    pub fn weighted_bce_with_logits(
        &mut self,
        logits: Var,
        targets: Vec<bool>,
        beta: T,
    ) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(TensorError::InvalidArgument {
                op: "weighted_bce_with_logits",
                reason: format!("{} logits vs {} targets", z.len(), targets.len()),
            });
        }
        let bound = bce_logit_bound();
        let b = beta.to_f64_lossy();
        let mut loss = 0.0;
        for (&zi, &y) in z.data().iter().zip(&targets) {
            let zc = zi.to_f64_lossy().clamp(-bound, bound);
            loss += if y { b * softplus(-zc) } else { (1.0 - b) * softplus(zc) };
        }
        let out = Matrix::filled(1, 1, T::lit(loss)).ensure_finite("weighted_bce_with_logits")?;
        Ok(self.push(
            out,
            Op::Bce {
                logits,
                targets,
                beta,
            },
        ))
    }

    /// `sum_k w_k * x_k` over scalar (`1 x 1`) values.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let m = self.value(v);
            if m.shape() != (1, 1) {
                return Err(TensorError::InvalidArgument {
                    op: "weighted_sum",
                    reason: "terms must be scalars".into(),
                });
            }
            total += w * m.get(0, 0);
        }
        Ok(self.push(Matrix::filled(1, 1, total), Op::WeightedSum(terms.to_vec())))
    }

    /// Replays adjoints from the scalar `loss`, seeded with `loss_adjoint`.
    pub fn backward(&self, loss: Var, loss_adjoint: T) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Tape(format!(
                "loss handle {} is not on this tape ({} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(TensorError::Tape(format!(
                "loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut params = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Matrix<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, loss_adjoint));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(id) => accumulate_into(&mut params.values[id.0], &g)?,
                Op::MatMul(a, b) => {
                    let ga = kernels::matmul_a_bt(&g, self.value(*b))?;
                    let gb = kernels::matmul_at_b(self.value(*a), &g)?;
                    push_grad(&mut grads, *a, ga)?;
                    push_grad(&mut grads, *b, gb)?;
                }
                Op::AddRow(a, row) => {
                    push_grad(&mut grads, *row, kernels::column_sums(&g))?;
                    push_grad(&mut grads, *a, g)?;
                }
                Op::Add(a, b) => {
                    push_grad(&mut grads, *b, g.clone())?;
                    push_grad(&mut grads, *a, g)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    stats,
                } => {
                    let gv = self.value(*gain).data();
                    let xhat = &stats.normalized;
                    let c = T::from_usize(g.cols()).unwrap_or_else(T::one);
                    let mut gx = Matrix::zeros(g.rows(), g.cols());
                    let mut ggain = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        let (grow, xrow) = (g.row(r), xhat.row(r));
                        let mut mean_gh = T::zero();
                        let mut mean_ghx = T::zero();
                        for j in 0..g.cols() {
                            let gh = grow[j] * gv[j];
                            mean_gh += gh;
                            mean_ghx += gh * xrow[j];
                            ggain.data_mut()[j] += grow[j] * xrow[j];
                        }
                        mean_gh = mean_gh / c;
                        mean_ghx = mean_ghx / c;
                        let rstd = stats.inv_std[r];
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd * (grow[j] * gv[j] - mean_gh - xrow[j] * mean_ghx);
                        }
                    }
                    push_grad(&mut grads, *bias, kernels::column_sums(&g))?;
                    push_grad(&mut grads, *gain, ggain)?;
                    push_grad(&mut grads, *x, gx)?;
                }
                Op::Gelu(x) => {
                    let gx = kernels::gelu_grad(self.value(*x), &g)?;
                    push_grad(&mut grads, *x, gx)?;
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[i].value.as_ref().expect("sigmoid value");
                    let data = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &g)| g * y * (T::one() - y))
                        .collect();
                    push_grad(&mut grads, *x, Matrix::new(g.rows(), g.cols(), data)?)?;
                }
                Op::Attention {
                    qkv,
                    heads,
                    scale,
                    cache,
                } => {
                    let gq =
                        kernels::attention_backward(self.value(*qkv), cache, *heads, *scale, &g)?;
                    push_grad(&mut grads, *qkv, gq)?;
                }
                Op::Gather { x, indices } => {
                    let src = self.value(*x);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for (k, &row) in indices.iter().enumerate() {
                        for (o, &v) in gx.row_mut(row).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    push_grad(&mut grads, *x, gx)?;
                }
                Op::Scatter { base, src, indices } => {
                    let gsrc = g.gather_rows(indices)?;
                    let mut gbase = g;
                    for &row in indices {
                        gbase.row_mut(row).iter_mut().for_each(|v| *v = T::zero());
                    }
                    push_grad(&mut grads, *src, gsrc)?;
                    push_grad(&mut grads, *base, gbase)?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        push_grad(&mut grads, p, g.slice_cols(offset, w))?;
                        offset += w;
                    }
                }
                Op::Permute { x, map } => {
                    let src = self.value(*x);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for (j, &s) in map.iter().enumerate() {
                        gx.data_mut()[s] += g.data()[j];
                    }
                    push_grad(&mut grads, *x, gx)?;
                }
                Op::Bilinear { x } => {
                    let (h, w) = self.value(*x).shape();
                    push_grad(&mut grads, *x, kernels::bilinear_resize_adjoint(&g, h, w)?)?;
                }
                Op::Bce {
                    logits,
                    targets,
                    beta,
                } => {
                    let bound = bce_logit_bound();
                    let up = g.get(0, 0);
                    let z = self.value(*logits);
                    let data = z
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&zi, &y)| {
                            let zf = zi.to_f64_lossy();
                            if zf < -bound || zf > bound {
                                return T::zero();
                            }
                            let p = sigmoid_scalar(zi);
                            let d = if y {
                                -*beta * (T::one() - p)
                            } else {
                                (T::one() - *beta) * p
                            };
                            d * up
                        })
                        .collect();
                    push_grad(&mut grads, *logits, Matrix::new(z.rows(), z.cols(), data)?)?;
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        push_grad(&mut grads, v, Matrix::filled(1, 1, w * g.get(0, 0)))?;
                    }
                }
            }
        }
        Ok(params)
    }
}

fn accumulate_into<T: Real>(acc: &mut Matrix<T>, g: &Matrix<T>) -> Result<()> {
    if acc.shape() != g.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "backward",
            left: acc.shape(),
            right: g.shape(),
        });
    }
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
    Ok(())
}

fn push_grad<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => accumulate_into(acc, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
