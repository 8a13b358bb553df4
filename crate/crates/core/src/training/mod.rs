//! Cross-entropy and self-critical training, learning-rate schedule, early
//! stopping, datasets.

mod config;
mod data;
mod optim;
mod schedule;
mod steps;
mod trainer;

pub use config::{RlConfig, XeConfig};
pub use data::{read_captions, CaptionDataset};
pub use optim::{Adam, AdamConfig, GroupLr};
pub use schedule::{lambda_lr, EarlyStop, StopDecision};
pub use steps::{caption_words, scst_gradients, scst_step, xe_gradients, xe_step, ScstConfig};
pub use trainer::{
    evaluate_greedy, generate_greedy, reward_idf, EpochLog, PreparedData, Stage, TrainState, Trainer,
};

#[cfg(test)]
mod tests;
