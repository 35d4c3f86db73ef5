//! Training objective, optimizers and the sampling loop.

mod loss;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

pub use loss::{
    efficient_loss, efficient_loss_and_grad, lower_bound_exact, naive_loss, trajectory_log_prob,
    LossReport, EXACT_LIMIT,
};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};
pub use trainer::{batch_losses, sample_prefix, train, CurvePoint};

use crate::error::{BlmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Steps between checkpoint callbacks; 0 calls it only at the end.
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            weight_decay: 0.0,
            dropout: 0.1,
            batch_size: 16,
            max_steps: 1000,
            clip_norm: 1.0,
            warmup_steps: 0,
            seed: 0,
            checkpoint_every: 0,
            optimizer: OptimizerKind::Sgd { momentum: 0.0 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("dropout", self.dropout),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(BlmError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.dropout >= 1.0 {
            return Err(BlmError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 {
            return Err(BlmError::Config("batch_size must be at least 1".into()));
        }
        if let OptimizerKind::Sgd { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(BlmError::Config(format!("momentum {momentum} not in [0, 1)")));
            }
        }
        Ok(())
    }
}
