//! Adam, the reduce-on-plateau scheduler, the shared training loop with
//! instability restarts, run logs and checkpoints.

mod checkpoint;
mod optim;
mod runlog;
mod trainer;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint};
pub use optim::{Adam, AdamConfig, PlateauScheduler, SchedulerConfig};
pub use runlog::{EpochRecord, RunEvent, RunLog, RunMetadata};
pub use trainer::{evaluate_loss, train, train_logged, GroupLoss, TrainOutcome, Trainable};

use crate::tensor::Precision;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub num_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub output_dir: Option<String>,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub nan_restart_max: usize,
    /// Global gradient-norm clip per optimizer group; off by default.
    pub grad_clip: Option<f64>,
    pub precision: Precision,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_epochs: 100,
            learning_rate: 1e-4,
            batch_size: 100,
            output_dir: None,
            scheduler: SchedulerConfig::default(),
            seed: 0,
            optimizer: AdamConfig::default(),
            nan_restart_max: 3,
            grad_clip: None,
            precision: Precision::F64,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.scheduler.patience < 1 {
            return bad("scheduler.patience must be ≥ 1".into());
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor < 1.0) {
            return bad(format!("scheduler.factor must lie in (0, 1), got {}", self.scheduler.factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        content_hash(&serde_json::to_vec(self).expect("train config is serializable"))
    }
}

/// Hex SHA-256 of a byte payload.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let cfg = TrainConfig {
            grad_clip: Some(5.0),
            seed: 42,
            ..Default::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.scheduler.patience = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3}"#).is_err());
    }
}
