use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;

fn default_lr() -> f64 {
    0.1
}
fn default_decay_epochs() -> Vec<usize> {
    vec![120, 160]
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    16
}
fn default_weight_decay() -> f64 {
    4e-4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_frames() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_decay_epochs")]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    #[serde(default)]
    pub seed: u64,
    /// Sequences are resampled to this many frames.
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default)]
    pub center_joint: usize,
    /// Stop once an epoch's training accuracy reaches this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

impl TrainConfig {
    /// Desk-scale defaults: 200 epochs, decay ×0.1 at 120 and 160.
    pub fn new(network: NetworkConfig) -> Self {
        TrainConfig {
            network,
            lr: default_lr(),
            lr_decay_epochs: default_decay_epochs(),
            lr_decay_factor: default_decay_factor(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            weight_decay: default_weight_decay(),
            momentum: default_momentum(),
            nesterov: true,
            seed: 0,
            frames: default_frames(),
            center_joint: 0,
            target_accuracy: None,
        }
    }

    /// Named schedule presets: `desk` and `full-schedule`
    /// (85 epochs, lr 0.05, ×0.1 at 45, 65 and 75).
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "desk" => {
                self.lr = default_lr();
                self.epochs = default_epochs();
                self.lr_decay_epochs = default_decay_epochs();
                self.lr_decay_factor = default_decay_factor();
            }
            "full-schedule" => {
                self.lr = 0.05;
                self.epochs = 85;
                self.lr_decay_epochs = vec![45, 65, 75];
                self.lr_decay_factor = 0.1;
            }
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        self.network.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err("lr must be a finite non-negative number");
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return err("lr_decay_factor must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.frames == 0 {
            return err("batch_size and frames must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return err("momentum must lie in [0, 1) and weight_decay be non-negative");
        }
        Ok(())
    }

    /// Learning rate in effect once `epochs_done` epochs have completed.
    pub fn lr_after(&self, epochs_done: usize) -> f64 {
        let k = self.lr_decay_epochs.iter().filter(|&&d| d <= epochs_done).count();
        self.lr * self.lr_decay_factor.powi(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SkeletonRef;

    fn cfg() -> TrainConfig {
        TrainConfig::new(NetworkConfig::small(3, SkeletonRef::Path("x.json".into())))
    }

    #[test]
    fn step_decay() {
        let mut c = cfg();
        c.apply_preset("full-schedule").unwrap();
        assert_eq!(c.lr_after(0), 0.05);
        assert_eq!(c.lr_after(44), 0.05);
        assert!((c.lr_after(45) - 0.005).abs() < 1e-15);
        assert!((c.lr_after(70) - 0.0005).abs() < 1e-16);
        assert!((c.lr_after(85) - 0.00005).abs() < 1e-17);
    }

    #[test]
    fn json_defaults() {
        let text = r#"{"network": {"blocks": [{"in_channels": 3, "out_channels": 8, "temporal_stride": 1, "n_branches": 1}],
                       "n_classes": 2, "skeleton": "s.json"}}"#;
        let c: TrainConfig = serde_json::from_str(text).unwrap();
        assert_eq!(c.epochs, 200);
        assert_eq!(c.lr_decay_epochs, vec![120, 160]);
        assert_eq!(c.weight_decay, 4e-4);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = cfg();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.lr_decay_factor = 1.5;
        assert!(c.validate().is_err());
        assert!(cfg().apply_preset("nope").is_err());
    }
}
