use std::collections::HashMap;
use std::hash::Hash;

use super::NGramStats;
use crate::error::{Error, Result};

/// Corpus BLEU. Returns cumulative BLEU-1 ..= BLEU-`max_n`: the geometric
/// mean of corpus-level clipped n-gram precisions times the brevity penalty.
/// The reference length of each candidate is the closest one (shorter on
/// ties). No smoothing: a zero precision gives a zero score.
pub fn bleu<T: Eq + Hash + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    max_n: usize,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::data("BLEU needs at least one candidate"));
    }
    if candidates.len() != references.len() {
        return Err(Error::data(format!(
            "{} candidates for {} images",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::config("BLEU order must be at least 1"));
    }
    let mut matched = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::data("BLEU needs at least one reference per image"));
        }
        let stats = NGramStats::new(cand, max_n);
        let mut max_ref: HashMap<&[T], u32> = HashMap::new();
        let ref_stats: Vec<NGramStats<T>> = refs.iter().map(|r| NGramStats::new(r, max_n)).collect();
        for rs in &ref_stats {
            for (g, c) in rs.iter() {
                let e = max_ref.entry(g.as_slice()).or_insert(0);
                *e = (*e).max(c);
            }
        }
        for (g, c) in stats.iter() {
            let clip = max_ref.get(g.as_slice()).copied().unwrap_or(0);
            matched[g.len() - 1] += u64::from(c.min(clip));
        }
        for n in 1..=max_n {
            total[n - 1] += (cand.len() + 1).saturating_sub(n) as u64;
        }
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
    }
    if cand_len == 0 {
        return Ok(vec![0.0; max_n]);
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 {
            log_sum = f64::NEG_INFINITY;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out.push(bp * (log_sum / (n + 1) as f64).exp());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(text: &str) -> Vec<&str> {
        text.split_whitespace().collect()
    }

    #[test]
    fn identical_corpus_scores_one() {
        let refs = vec![vec![s("a cat sat on the mat")], vec![s("two dogs play in the snow")]];
        let cands: Vec<_> = refs.iter().map(|r| r[0].clone()).collect();
        for v in bleu(&cands, &refs, 4).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_overlap_scores_zero() {
        let refs = vec![vec![s("a b c")]];
        assert_eq!(bleu(&[s("x y z")], &refs, 4).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn hand_computed_example() {
        // p1 = 5/7 (clipped "the" x2, cat, on, mat), p2 = 3/6, c = 7 > r = 6.
        let refs = vec![vec![s("the cat is on the mat"), s("there is a cat here")]];
        let out = bleu(&[s("the cat the cat on the mat")], &refs, 2).unwrap();
        assert!((out[0] - 5.0 / 7.0).abs() < 1e-12);
        assert!((out[1] - (5.0f64 / 14.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_uses_closest_reference() {
        let refs = vec![vec![s("a b c d e f"), s("a b c d")]];
        let out = bleu(&[s("a b c")], &refs, 1).unwrap();
        assert!((out[0] - (1.0 - 4.0f64 / 3.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(bleu::<&str>(&[], &[], 4).is_err());
    }
}
