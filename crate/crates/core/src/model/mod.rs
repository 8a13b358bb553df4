//! Captioning network: grid features (or a toy patch encoder), prototype
//! aggregation blocks, transformer decoder, decoding strategies.

mod checkpoint;
mod config;
mod decode;
mod features;
mod network;

pub use checkpoint::{Checkpoint, Dtype, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{BlockSchedule, LevelRef, ModelConfig, PrototypeMode, ToyEncoderConfig};
pub use decode::{
    attention_maps, beam_decode, greedy_decode, sample_decode, sequence_log_prob, Decoded, EnsembleScorer,
    ModelScorer, StepScorer, NEVER_GENERATED,
};
pub use features::{load_grid_features, save_grid_features, GridFeatures, Image, GRID_MAGIC};
pub use network::{Captioner, DecoderOutput, Visual};

#[cfg(test)]
mod tests;
