use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epoch-indexed warm-up and step decay for epoch `n >= 1`:
/// `n/4` of the base rate for `n <= 3`, the base rate up to epoch 10, then
/// 0.2 of it for epochs 11 and 12 and 0.04 of it afterwards.
pub fn lambda_lr(n: usize, base_lr: f64) -> Result<f64> {
    let factor = match n {
        0 => return Err(Error::config("epochs are numbered from 1")),
        1..=3 => n as f64 / 4.0,
        4..=10 => 1.0,
        11..=12 => 0.2,
        _ => 0.2 * 0.2,
    };
    Ok(factor * base_lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a new best score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records an epoch's validation score. Returns whether it is a new best
    /// and whether training should stop.
    pub fn update(&mut self, score: f64) -> (bool, StopDecision) {
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        let decision = if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        (improved, decision)
    }
}
