//! Optimizer and schedule configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule for weights and bias. The position learning rate
/// is a fixed separate value and is not scheduled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Schedule {
    /// Multiply the base rate by `factor` at each passed milestone.
    Step { milestones: Vec<usize>, factor: f64 },
    /// `base_lr * (1 - iter / total_iters)`.
    LinearDecay,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Step {
            milestones: Vec::new(),
            factor: 0.1,
        }
    }
}

/// How the position gradient is normalized before the position step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PositionGradNorm {
    /// L2-normalize the concatenated position-gradient vector of each layer,
    /// making the position learning rate a per-step displacement.
    #[default]
    L2Layer,
    /// L2-normalize each synapse's `(d_alpha, d_beta)` pair separately.
    L2Synapse,
    /// Use the raw gradient.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Nesterov momentum coefficient for weights and bias.
    pub momentum: f64,
    /// L2 decay applied to weights and bias only, never to positions.
    pub weight_decay: f64,
    /// Fixed learning rate for position parameters.
    pub position_lr: f64,
    pub position_grad_norm: PositionGradNorm,
    /// Apply momentum to positions as well (off by default: positions take
    /// plain steps).
    pub position_momentum: bool,
    /// Clamp learned offsets to `[-bound, bound]` after each step.
    pub position_clamp: Option<f64>,
    /// Iterations during which positions stay frozen.
    pub warmup_iters: usize,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub total_iters: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Trace recording period.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            position_lr: 1e-3,
            position_grad_norm: PositionGradNorm::L2Layer,
            position_momentum: false,
            position_clamp: None,
            warmup_iters: 0,
            schedule: Schedule::default(),
            batch_size: 32,
            total_iters: 1000,
            seed: 0,
            loss: LossKind::Mse,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Mse,
    SoftmaxCrossEntropy,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.position_lr <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning rates must be positive".into(),
            ));
        }
        if self.warmup_iters > self.total_iters {
            return Err(Error::InvalidArgument(format!(
                "warmup_iters ({}) exceeds total_iters ({})",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidArgument("log_every must be >= 1".into()));
        }
        if let Schedule::Step { factor, .. } = self.schedule {
            if factor <= 0.0 {
                return Err(Error::InvalidArgument("step factor must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Learning rate for weights and bias at a given iteration.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    match &cfg.schedule {
        Schedule::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| iter >= m).count();
            cfg.base_lr * factor.powi(passed as i32)
        }
        Schedule::LinearDecay => cfg.base_lr * (1.0 - iter as f64 / cfg.total_iters as f64),
    }
}

/// Conventional warm-up length for single-shared-shape units: the same
/// fraction of training that 10k iterations is of a 64k run. Depthwise
/// units train best with no warm-up at all.
pub fn single_group_warmup(total_iters: usize) -> usize {
    total_iters * 10 / 64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_cfg() -> TrainConfig {
        TrainConfig {
            schedule: Schedule::Step {
                milestones: vec![32000, 48000],
                factor: 0.1,
            },
            total_iters: 64000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn step_schedule_divides_by_ten_at_milestones() {
        let cfg = step_cfg();
        assert_eq!(lr_at(&cfg, 0), 0.1);
        assert!((lr_at(&cfg, 40000) - 0.01).abs() < 1e-15);
        assert!((lr_at(&cfg, 50000) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn linear_decay_boundaries() {
        let cfg = TrainConfig {
            schedule: Schedule::LinearDecay,
            total_iters: 100,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(&cfg, 0), 0.1);
        assert!((lr_at(&cfg, 50) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn warmup_cannot_exceed_total() {
        let cfg = TrainConfig {
            warmup_iters: 2000,
            total_iters: 1000,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn conventional_warmup_fraction() {
        assert_eq!(single_group_warmup(64000), 10000);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = step_cfg();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
