//! Tree-structured concept prototypes for image captioning.
//!
//! Concept words are embedded, clustered into a coarse-to-fine prototype tree,
//! and injected into visual grid features by a stack of cross-modal attention
//! blocks before a transformer decoder generates the caption. Training runs a
//! cross-entropy stage followed by self-critical sequence training with a
//! CIDEr-D reward.

pub mod error;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod prototype_tree;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
