//! Seeded generators: planted embedding hierarchies with known labels, and
//! a toy captioning world whose answers are known.

mod planted;
mod toy;

pub use planted::{gen_planted_embeddings, PlantedEmbeddings, PlantedTreeSpec};
pub use toy::{gen_toy_dataset, ToyDataset, ToySample, ToyWorld, ToyWorldConfig};
