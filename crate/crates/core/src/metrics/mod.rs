//! CIDEr-D and BLEU.
//!
//! Both are generic over the token type so they can score word strings at
//! evaluation time and raw token ids as a training reward.

mod bleu;
mod cider;

use std::hash::Hash;

use indexmap::IndexMap;

use serde::Serialize;

pub use bleu::bleu;
pub use cider::{cider_d, cider_d_corpus, IdfTable, CIDER_N, CIDER_SIGMA};

use crate::error::{Error, Result};
use crate::lexicon::words;

/// Counts of every n-gram of order `1..=max_n` in one sentence. Iteration
/// follows first occurrence, so sums over it are reproducible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NGramStats<T: Eq + Hash> {
    counts: IndexMap<Vec<T>, u32>,
    len: usize,
}

impl<T: Eq + Hash + Clone> NGramStats<T> {
    pub fn new(tokens: &[T], max_n: usize) -> Self {
        let mut counts = IndexMap::new();
        for n in 1..=max_n {
            for w in tokens.windows(n) {
                *counts.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        NGramStats {
            counts,
            len: tokens.len(),
        }
    }

    pub fn count(&self, ngram: &[T]) -> u32 {
        self.counts.get(ngram).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<T>, u32)> {
        self.counts.iter().map(|(g, &c)| (g, c))
    }

    /// Sentence length in tokens.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Corpus scores plus per-image CIDEr-D.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub cider_d: f64,
    /// Cumulative BLEU-1 .. BLEU-4.
    pub bleu: Vec<f64>,
    pub per_image_cider_d: Vec<f64>,
}

/// Scores text captions after lexicon normalization. The idf table is built
/// from `references` itself.
pub fn evaluate_text(candidates: &[String], references: &[Vec<String>]) -> Result<EvalReport> {
    if candidates.len() != references.len() {
        return Err(Error::data(format!(
            "{} candidates for {} images",
            candidates.len(),
            references.len()
        )));
    }
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| words(c)).collect();
    let refs: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| words(r)).collect())
        .collect();
    let idf = IdfTable::build(&refs)?;
    let (cider_d, per_image_cider_d) = cider_d_corpus(&cands, &refs, &idf)?;
    Ok(EvalReport {
        cider_d,
        bleu: bleu(&cands, &refs, 4)?,
        per_image_cider_d,
    })
}
