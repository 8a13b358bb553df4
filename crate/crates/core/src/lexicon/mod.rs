//! Vocabulary, concept list and word-embedding ingestion.

mod embeddings;
mod vocab;

pub use embeddings::{
    load_embeddings, read_embeddings, write_embeddings_binary, write_embeddings_text,
    EmbeddingMatrix, EMBEDDING_MAGIC,
};
pub use vocab::{
    normalize, words, ConceptList, Vocabulary, BOS, BOS_ID, EOS, EOS_ID, PAD, PAD_ID,
};
