use rand::Rng;

use super::network::{Captioner, Visual};
use crate::error::{Error, Result};
use crate::lexicon::{BOS_ID, EOS_ID, PAD_ID};
use crate::numerics::{kernels::log_sum_exp, Graph, Tensor};

/// Tokens that are never generated.
pub const NEVER_GENERATED: [u32; 2] = [PAD_ID, BOS_ID];

/// Next-token log-probabilities for a batch of equal-length prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    /// `images[i]` is the sample that `prefixes[i]` (starting with `<bos>`)
    /// belongs to. Never-generated tokens get `-inf`.
    fn next_log_probs(&self, images: &[usize], prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

fn log_softmax_masked(row: &[f64]) -> Vec<f64> {
    let mut x = row.to_vec();
    for &b in &NEVER_GENERATED {
        x[b as usize] = f64::NEG_INFINITY;
    }
    let lse = log_sum_exp(&x);
    x.iter().map(|v| v - lse).collect()
}

/// Scores prefixes with one model over precomputed aggregated features.
pub struct ModelScorer<'a> {
    model: &'a Captioner,
    memory: Tensor,
    n_grid: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Captioner, batch: &[&Visual]) -> Result<Self> {
        let (memory, n_grid) = model.memory(batch)?;
        Ok(ModelScorer { model, memory, n_grid })
    }

    pub fn n_images(&self) -> usize {
        self.memory.n_rows() / self.n_grid
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn max_len(&self) -> usize {
        self.model.config().max_len
    }

    fn next_log_probs(&self, images: &[usize], prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let d = self.memory.last_dim();
        let rows = self.n_grid * d;
        let mut mem = Vec::with_capacity(images.len() * rows);
        for &i in images {
            mem.extend_from_slice(&self.memory.data()[i * rows..(i + 1) * rows]);
        }
        let mut g = Graph::new();
        let memory = g.input(Tensor::new(vec![images.len() * self.n_grid, d], mem)?);
        let out = self.model.decode(&mut g, memory, self.n_grid, prefixes)?;
        let t = prefixes[0].len();
        let logits = g.value(out.logits);
        Ok((0..prefixes.len()).map(|i| log_softmax_masked(logits.row(i * t + t - 1))).collect())
    }
}

/// Averages the next-token distributions of several models.
pub struct EnsembleScorer<'a> {
    members: Vec<ModelScorer<'a>>,
}

impl<'a> EnsembleScorer<'a> {
    pub fn new(models: &[&'a Captioner], batches: &[Vec<&Visual>]) -> Result<Self> {
        if models.is_empty() || models.len() != batches.len() {
            return Err(Error::config("an ensemble needs one input batch per model"));
        }
        let v = models[0].config().vocab_size;
        if models.iter().any(|m| m.config().vocab_size != v) {
            return Err(Error::config("ensemble members must share a vocabulary"));
        }
        let members = models
            .iter()
            .zip(batches)
            .map(|(m, b)| ModelScorer::new(m, b))
            .collect::<Result<Vec<_>>>()?;
        if members.iter().any(|m| m.n_images() != members[0].n_images()) {
            return Err(Error::data("ensemble members must see the same images"));
        }
        Ok(EnsembleScorer { members })
    }
}

impl StepScorer for EnsembleScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    fn max_len(&self) -> usize {
        self.members.iter().map(|m| m.max_len()).min().unwrap_or(0)
    }

    fn next_log_probs(&self, images: &[usize], prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        if self.members.len() == 1 {
            return self.members[0].next_log_probs(images, prefixes);
        }
        let mut sum: Option<Vec<Vec<f64>>> = None;
        for m in &self.members {
            let lp = m.next_log_probs(images, prefixes)?;
            match &mut sum {
                None => sum = Some(lp.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect()),
                Some(s) => {
                    for (sr, lr) in s.iter_mut().zip(&lp) {
                        for (a, b) in sr.iter_mut().zip(lr) {
                            *a += b.exp();
                        }
                    }
                }
            }
        }
        let k = self.members.len() as f64;
        Ok(sum
            .expect("non-empty ensemble")
            .into_iter()
            .map(|r| r.into_iter().map(|p| (p / k).ln()).collect())
            .collect())
    }
}

/// A generated caption: word ids (no `<bos>`/`<eos>`) and its total
/// log-probability including the `<eos>` step.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// `false` when generation hit `max_len` without `<eos>`.
    pub finished: bool,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn framed(tokens: &[u32]) -> Vec<u32> {
    let mut p = Vec::with_capacity(tokens.len() + 1);
    p.push(BOS_ID);
    p.extend_from_slice(tokens);
    p
}

/// Step-synchronous decoding of `rows` (sample index per row); `choose`
/// picks the next token from a row's log-probabilities.
fn decode_rows(
    scorer: &impl StepScorer,
    rows: &[usize],
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Result<Vec<Decoded>> {
    let mut out: Vec<Decoded> = rows
        .iter()
        .map(|_| Decoded {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..scorer.max_len() {
        if active.is_empty() {
            break;
        }
        let images: Vec<usize> = active.iter().map(|&r| rows[r]).collect();
        let prefixes: Vec<Vec<u32>> = active.iter().map(|&r| framed(&out[r].tokens)).collect();
        let lps = scorer.next_log_probs(&images, &prefixes)?;
        let mut still = Vec::with_capacity(active.len());
        for (&r, lp) in active.iter().zip(&lps) {
            let tok = choose(lp);
            out[r].log_prob += lp[tok];
            if tok as u32 == EOS_ID {
                out[r].finished = true;
            } else {
                out[r].tokens.push(tok as u32);
                still.push(r);
            }
        }
        active = still;
    }
    Ok(out)
}

/// Most likely token at every step, for every sample of the scorer.
pub fn greedy_decode(scorer: &impl StepScorer, n_images: usize) -> Result<Vec<Decoded>> {
    let rows: Vec<usize> = (0..n_images).collect();
    decode_rows(scorer, &rows, argmax)
}

/// Samples `rows[i]`'s caption from `softmax(log p / temperature)`.
/// `log_prob` is under that tempered distribution.
pub fn sample_decode<R: Rng>(scorer: &impl StepScorer, rows: &[usize], temperature: f64, rng: &mut R) -> Result<Vec<Decoded>> {
    if !(temperature > 0.0) {
        return Err(Error::config("sampling temperature must be positive"));
    }
    let mut out = decode_rows(scorer, rows, |lp| {
        let scaled: Vec<f64> = lp.iter().map(|v| v / temperature).collect();
        let lse = log_sum_exp(&scaled);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (j, &s) in scaled.iter().enumerate() {
            let p = (s - lse).exp();
            if p > 0.0 {
                last = j;
            }
            acc += p;
            if u < acc {
                return j;
            }
        }
        last
    })?;
    if temperature != 1.0 {
        // Recompute the tempered log-probability of the chosen path.
        for (d, &r) in out.iter_mut().zip(rows) {
            let mut path = d.tokens.clone();
            if d.finished {
                path.push(EOS_ID);
            }
            d.log_prob = sequence_log_prob(scorer, r, &path, temperature)?;
        }
    }
    Ok(out)
}

/// `sum_t log softmax(log p_t / temperature)[path_t]` along a token path.
pub fn sequence_log_prob(scorer: &impl StepScorer, image: usize, path: &[u32], temperature: f64) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..path.len() {
        let lp = &scorer.next_log_probs(&[image], &[framed(&path[..t])])?[0];
        let scaled: Vec<f64> = lp.iter().map(|v| v / temperature).collect();
        total += scaled[path[t] as usize] - log_sum_exp(&scaled);
    }
    Ok(total)
}

/// Beam search with `beam` hypotheses. Scores are summed log-probabilities
/// divided by `len^length_penalty` (`len` counts `<eos>`); with the default
/// penalty 0 they are plain sums. `beam = 1` reproduces greedy decoding.
pub fn beam_decode(scorer: &impl StepScorer, image: usize, beam: usize, length_penalty: f64) -> Result<Decoded> {
    if beam == 0 {
        return Err(Error::config("beam width must be at least 1"));
    }
    let norm = |lp: f64, len: usize| {
        if length_penalty == 0.0 {
            lp
        } else {
            lp / (len.max(1) as f64).powf(length_penalty)
        }
    };
    let mut beams: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Decoded> = Vec::new();
    for _ in 0..scorer.max_len() {
        let prefixes: Vec<Vec<u32>> = beams.iter().map(|(t, _)| framed(t)).collect();
        let lps = scorer.next_log_probs(&vec![image; beams.len()], &prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, lp) in lps.iter().enumerate() {
            for (v, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cands.push((beams[b].1 + l, b, v));
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::with_capacity(beam);
        for &(score, b, v) in cands.iter().take(beam) {
            let mut tokens = beams[b].0.clone();
            if v as u32 == EOS_ID {
                finished.push(Decoded {
                    tokens,
                    log_prob: score,
                    finished: true,
                });
            } else {
                tokens.push(v as u32);
                next.push((tokens, score));
            }
        }
        beams = next;
        if beams.is_empty() {
            break;
        }
        if length_penalty == 0.0 {
            let best_done = finished.iter().map(|d| d.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= beams[0].1 {
                break;
            }
        }
    }
    finished.extend(beams.into_iter().map(|(tokens, log_prob)| Decoded {
        tokens,
        log_prob,
        finished: false,
    }));
    let key = |d: &Decoded| norm(d.log_prob, d.tokens.len() + usize::from(d.finished));
    let mut best = 0;
    for i in 1..finished.len() {
        if key(&finished[i]) > key(&finished[best]) {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}

/// Last decoder layer's cross-attention while producing each word of
/// `caption`, averaged over heads: one `n_grid` row per word.
pub fn attention_maps(model: &Captioner, visual: &Visual, caption: &[u32]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let (memory, n) = model.encode(&mut g, &[visual])?;
    let input = framed(&caption[..caption.len().min(model.config().max_len - 1)]);
    let out = model.decode(&mut g, memory, n, &[input])?;
    let (probs, layout) = g.attention_probs(out.cross_attention).expect("attention node");
    let (h, t, k) = (layout.heads, layout.q_len, layout.kv_len);
    let words = caption.len().min(t);
    Ok((0..words)
        .map(|i| {
            (0..k)
                .map(|j| (0..h).map(|hh| probs[(hh * t + i) * k + j]).sum::<f64>() / h as f64)
                .collect()
        })
        .collect())
}
