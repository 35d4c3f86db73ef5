//! First-order optimizers with decoupled weight decay and linear warmup.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

pub struct Optimizer<F> {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    warmup: usize,
    steps: usize,
    first: Vec<Option<Matrix<F>>>,
    second: Vec<Option<Matrix<F>>>,
}

impl<F: Real> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, warmup: usize, n_params: usize) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            warmup,
            steps: 0,
            first: vec![None; n_params],
            second: vec![None; n_params],
        }
    }

    /// Learning rate for the next update.
    pub fn current_lr(&self) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((self.steps + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update. Weight decay applies only to matrices with more than one row
    /// (biases, layer-norm gains and the blank projection are exempt).
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>) {
        let lr = self.current_lr();
        self.steps += 1;
        let t = self.steps as i32;
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            if self.weight_decay > 0.0 && p.rows() > 1 {
                p.scale(F::of(1.0 - lr * self.weight_decay));
            }
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    if momentum == 0.0 {
                        for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                            *x -= F::of(lr) * d;
                        }
                        continue;
                    }
                    let v = self.first[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    let mu = F::of(momentum);
                    for ((x, m), &d) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *m = mu * *m + d;
                        *x -= F::of(lr) * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    let v = self.second[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let step = F::of(lr * c2.sqrt() / c1);
                    let (b1, b2, e) = (F::of(beta1), F::of(beta2), F::of(eps));
                    let one = F::one();
                    for (((x, mi), vi), &d) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mi = b1 * *mi + (one - b1) * d;
                        *vi = b2 * *vi + (one - b2) * d * d;
                        *x -= step * *mi / (vi.sqrt() + e);
                    }
                }
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().f64();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(F::of(max_norm / norm));
    }
    norm
}
