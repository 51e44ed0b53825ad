use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, Matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return Err("Adam needs betas in [0, 1) and a positive epsilon".into());
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err("momentum must lie in [0, 1)".into());
                }
            }
        }
        Ok(())
    }
}

/// First-order optimizer state over an `f32` parameter store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Matrix<f32>>,
    second: Vec<Matrix<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore<f32>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
                .collect::<Vec<_>>()
        };
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            kind,
            lr,
            step: 0,
            first: zeros(),
            second,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>) {
        self.step += 1;
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id).data();
            let w = params.get_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    let m = self.first[k].data_mut();
                    let v = self.second[k].data_mut();
                    for i in 0..w.len() {
                        let gi = f64::from(g[i]);
                        let mi = beta1 * f64::from(m[i]) + (1.0 - beta1) * gi;
                        let vi = beta2 * f64::from(v[i]) + (1.0 - beta2) * gi * gi;
                        m[i] = mi as f32;
                        v[i] = vi as f32;
                        let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                        w[i] = (f64::from(w[i]) - update) as f32;
                    }
                }
                OptimizerKind::SgdMomentum { momentum } => {
                    let m = self.first[k].data_mut();
                    for i in 0..w.len() {
                        let mi = momentum * f64::from(m[i]) + f64::from(g[i]);
                        m[i] = mi as f32;
                        w[i] = (f64::from(w[i]) - self.lr * mi) as f32;
                    }
                }
            }
        }
    }
}
