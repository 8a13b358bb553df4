use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use indexmap::IndexMap;

use super::NGramStats;
use crate::error::{Error, Result};

pub const CIDER_N: usize = 4;
/// Standard deviation of the gaussian length penalty, in words.
pub const CIDER_SIGMA: f64 = 6.0;

/// Document frequencies over a reference corpus, one document per image.
#[derive(Clone, Debug)]
pub struct IdfTable<T: Eq + Hash> {
    df: HashMap<Vec<T>, u32>,
    n_images: usize,
}

impl<T: Eq + Hash + Clone> IdfTable<T> {
    /// `corpus[i]` holds the reference sentences of image `i`.
    pub fn build(corpus: &[Vec<Vec<T>>]) -> Result<Self> {
        if corpus.is_empty() || corpus.iter().all(|refs| refs.is_empty()) {
            return Err(Error::data("idf needs at least one image with a reference"));
        }
        let mut df = HashMap::new();
        for refs in corpus {
            let mut seen = HashSet::new();
            for r in refs {
                for n in 1..=CIDER_N {
                    for w in r.windows(n) {
                        if seen.insert(w) {
                            *df.entry(w.to_vec()).or_insert(0) += 1;
                        }
                    }
                }
            }
        }
        Ok(IdfTable {
            df,
            n_images: corpus.len(),
        })
    }

    pub fn corpus_size(&self) -> usize {
        self.n_images
    }

    pub fn df(&self, ngram: &[T]) -> u32 {
        self.df.get(ngram).copied().unwrap_or(0)
    }

    /// `ln(N / max(1, df))`.
    pub fn idf(&self, ngram: &[T]) -> f64 {
        (self.n_images as f64).ln() - f64::from(self.df(ngram).max(1)).ln()
    }

    pub fn len(&self) -> usize {
        self.df.len()
    }

    pub fn is_empty(&self) -> bool {
        self.df.is_empty()
    }
}

struct TfIdf<'a, T> {
    vec: [IndexMap<&'a [T], f64>; CIDER_N],
    norm: [f64; CIDER_N],
    len: usize,
}

fn tf_idf<'a, T: Eq + Hash + Clone>(stats: &'a NGramStats<T>, idf: &IdfTable<T>) -> TfIdf<'a, T> {
    let mut vec: [IndexMap<&[T], f64>; CIDER_N] = Default::default();
    let mut norm = [0.0; CIDER_N];
    for (g, tf) in stats.iter() {
        let n = g.len() - 1;
        let v = f64::from(tf) * idf.idf(g);
        vec[n].insert(g.as_slice(), v);
        norm[n] += v * v;
    }
    TfIdf {
        vec,
        norm: norm.map(f64::sqrt),
        len: stats.len(),
    }
}

/// Per-order similarity between a candidate and one reference: clipped
/// tf-idf cosine times the length penalty.
fn similarity<T: Eq + Hash>(cand: &TfIdf<T>, reference: &TfIdf<T>) -> [f64; CIDER_N] {
    let delta = cand.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut out = [0.0; CIDER_N];
    for n in 0..CIDER_N {
        let mut dot = 0.0;
        for (g, &h) in &cand.vec[n] {
            if let Some(&r) = reference.vec[n].get(g) {
                dot += h.min(r) * r;
            }
        }
        if cand.norm[n] != 0.0 && reference.norm[n] != 0.0 {
            dot /= cand.norm[n] * reference.norm[n];
        }
        out[n] = dot * penalty;
    }
    out
}

/// CIDEr-D of one candidate against its references, in `[0, 10]`.
pub fn cider_d<T: Eq + Hash + Clone>(
    candidate: &[T],
    references: &[Vec<T>],
    idf: &IdfTable<T>,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::data("CIDEr-D needs at least one reference"));
    }
    let cand_stats = NGramStats::new(candidate, CIDER_N);
    let cand = tf_idf(&cand_stats, idf);
    let mut total = 0.0;
    for r in references {
        let ref_stats = NGramStats::new(r, CIDER_N);
        let sims = similarity(&cand, &tf_idf(&ref_stats, idf));
        total += sims.iter().sum::<f64>() / CIDER_N as f64;
    }
    Ok(10.0 * total / references.len() as f64)
}

/// Mean and per-image CIDEr-D over a corpus.
pub fn cider_d_corpus<T: Eq + Hash + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    idf: &IdfTable<T>,
) -> Result<(f64, Vec<f64>)> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::data(format!(
            "{} candidates for {} images",
            candidates.len(),
            references.len()
        )));
    }
    let per_image = candidates
        .iter()
        .zip(references)
        .map(|(c, rs)| cider_d(c, rs, idf))
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok((mean, per_image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(text: &str) -> Vec<&str> {
        text.split_whitespace().collect()
    }

    #[test]
    fn hand_computed_two_image_corpus() {
        let corpus = vec![vec![s("a b")], vec![s("c d")]];
        let idf = IdfTable::build(&corpus).unwrap();
        assert_eq!(idf.corpus_size(), 2);
        assert!((idf.idf(&["a"]) - 2f64.ln()).abs() < 1e-15);
        // unigram and bigram cosines are 1, no 3/4-grams: 10 * (1 + 1) / 4
        let score = cider_d(&s("a b"), &corpus[0], &idf).unwrap();
        assert!((score - 5.0).abs() < 1e-12, "{score}");
        assert_eq!(cider_d(&s("c d"), &corpus[0], &idf).unwrap(), 0.0);
    }

    #[test]
    fn single_image_corpus_scores_zero() {
        let corpus = vec![vec![s("a man rides a horse"), s("a person on a horse")]];
        let idf = IdfTable::build(&corpus).unwrap();
        assert_eq!(idf.idf(&["horse"]), 0.0);
        assert_eq!(cider_d(&s("a man rides a horse"), &corpus[0], &idf).unwrap(), 0.0);
    }

    #[test]
    fn df_counts_images_not_sentences() {
        let corpus = vec![vec![s("x y"), s("x y x")], vec![s("y z")], vec![s("w")]];
        let idf = IdfTable::build(&corpus).unwrap();
        assert_eq!(idf.df(&["x"]), 1);
        assert_eq!(idf.df(&["y"]), 2);
        assert_eq!(idf.df(&["x", "y"]), 1);
        assert_eq!(idf.df(&["q"]), 0);
        assert!((idf.idf(&["y"]) - (3.0f64 / 2.0).ln()).abs() < 1e-15);
        assert!((idf.idf(&["q"]) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(IdfTable::<&str>::build(&[]).is_err());
        assert!(IdfTable::<&str>::build(&[vec![]]).is_err());
        let idf = IdfTable::build(&[vec![s("a")], vec![s("b")]]).unwrap();
        assert!(cider_d(&s("a"), &[], &idf).is_err());
    }

    #[test]
    fn matching_four_gram_raises_the_four_gram_term() {
        let corpus = vec![
            vec![s("a dog runs across the green field"), s("the dog runs on grass")],
            vec![s("a cat sleeps on a red sofa")],
            vec![s("two birds sit on a wire")],
        ];
        let idf = IdfTable::build(&corpus).unwrap();
        let refs: Vec<_> = corpus[0].iter().map(|r| NGramStats::new(r, CIDER_N)).collect();
        let cases = [
            ("a dog sits", "zz yy xx ww", "across the green field"),
            ("the dog", "qq pp oo nn", "dog runs on grass"),
            ("", "aa bb cc dd", "a dog runs across"),
        ];
        for (prefix, filler, four_gram) in cases {
            let base: Vec<&str> = s(prefix).into_iter().chain(s(filler)).collect();
            let better: Vec<&str> = s(prefix).into_iter().chain(s(four_gram)).collect();
            assert_eq!(base.len(), better.len());
            let (bs, gs) = (NGramStats::new(&base, CIDER_N), NGramStats::new(&better, CIDER_N));
            let (bv, gv) = (tf_idf(&bs, &idf), tf_idf(&gs, &idf));
            for r in &refs {
                let rv = tf_idf(r, &idf);
                assert!(similarity(&gv, &rv)[3] >= similarity(&bv, &rv)[3]);
            }
            assert!(
                cider_d(&better, &corpus[0], &idf).unwrap() >= cider_d(&base, &corpus[0], &idf).unwrap()
            );
        }
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<Vec<u8>>>> {
        let sentence = proptest::collection::vec(0u8..6, 1..7);
        let image = proptest::collection::vec(sentence, 1..4);
        proptest::collection::vec(image, 2..5)
    }

    proptest! {
        #[test]
        fn reference_order_does_not_matter(corpus in corpus_strategy(), cand in proptest::collection::vec(0u8..6, 0..7)) {
            let idf = IdfTable::build(&corpus).unwrap();
            let a = cider_d(&cand, &corpus[0], &idf).unwrap();
            let mut rev = corpus[0].clone();
            rev.reverse();
            let b = cider_d(&cand, &rev, &idf).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((0.0..=10.0 + 1e-9).contains(&a));
        }

        // Only n-grams seen in the corpus keep their idf under duplication; a
        // candidate cut from a reference satisfies that.
        #[test]
        fn duplicating_the_corpus_keeps_scores(corpus in corpus_strategy(), cut in 0usize..6, take in 1usize..6) {
            let src = &corpus[1][0];
            let start = cut.min(src.len() - 1);
            let end = (start + take).min(src.len());
            let cand = src[start..end].to_vec();
            let idf = IdfTable::build(&corpus).unwrap();
            let doubled: Vec<_> = corpus.iter().chain(&corpus).cloned().collect();
            let idf2 = IdfTable::build(&doubled).unwrap();
            let a = cider_d(&cand, &corpus[0], &idf).unwrap();
            let b = cider_d(&cand, &corpus[0], &idf2).unwrap();
            prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        }
    }
}
