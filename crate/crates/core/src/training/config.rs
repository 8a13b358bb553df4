use serde::{Deserialize, Serialize};

use super::optim::GroupLr;
use super::steps::ScstConfig;
use crate::error::{Error, Result};

/// Cross-entropy stage. Epoch `n` uses `lambda_lr(n, base)` per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XeConfig {
    pub epochs: usize,
    /// Image-caption pairs per step.
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_other: f64,
}

impl Default for XeConfig {
    fn default() -> Self {
        XeConfig {
            epochs: 20,
            batch_size: 50,
            lr_encoder: 4e-5,
            lr_other: 4e-4,
        }
    }
}

impl XeConfig {
    pub fn validate(&self) -> Result<()> {
        check_stage("xe", self.batch_size, self.lr_encoder, self.lr_other)
    }

    pub fn base_lr(&self) -> GroupLr {
        GroupLr {
            encoder: self.lr_encoder,
            other: self.lr_other,
        }
    }
}

/// Self-critical stage with fixed learning rates and early stopping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub epochs: usize,
    /// Images per step.
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub k: usize,
    pub temperature: f64,
    /// Stop after this many epochs without a new best validation CIDEr-D.
    pub patience: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            epochs: 30,
            batch_size: 10,
            lr_encoder: 2e-6,
            lr_other: 2e-5,
            k: 5,
            temperature: 1.0,
            patience: 5,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        check_stage("rl", self.batch_size, self.lr_encoder, self.lr_other)?;
        self.scst().validate()?;
        if self.patience == 0 {
            return Err(Error::config("rl.patience must be at least 1"));
        }
        Ok(())
    }

    pub fn lr(&self) -> GroupLr {
        GroupLr {
            encoder: self.lr_encoder,
            other: self.lr_other,
        }
    }

    pub fn scst(&self) -> ScstConfig {
        ScstConfig {
            k: self.k,
            temperature: self.temperature,
        }
    }
}

fn check_stage(name: &str, batch: usize, lr_enc: f64, lr_other: f64) -> Result<()> {
    if batch == 0 {
        return Err(Error::config(format!("{name}.batch_size must be at least 1")));
    }
    if !(lr_enc > 0.0 && lr_other > 0.0) {
        return Err(Error::config(format!("{name} learning rates must be positive")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_settings() {
        let xe = XeConfig::default();
        assert_eq!((xe.epochs, xe.batch_size, xe.lr_encoder, xe.lr_other), (20, 50, 4e-5, 4e-4));
        let rl = RlConfig::default();
        assert_eq!((rl.epochs, rl.batch_size, rl.lr_encoder, rl.lr_other), (30, 10, 2e-6, 2e-5));
        xe.validate().unwrap();
        rl.validate().unwrap();
        assert!(RlConfig { k: 1, ..rl.clone() }.validate().is_err());
        assert!(XeConfig { lr_other: 0.0, ..xe }.validate().is_err());
    }
}
