use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, GroupLr};
use crate::error::{Error, Result};
use crate::lexicon::{Vocabulary, BOS_ID, EOS_ID, PAD_ID};
use crate::metrics::{cider_d, IdfTable};
use crate::model::{sample_decode, Captioner, Decoded, ModelScorer, Visual, NEVER_GENERATED};
use crate::numerics::Graph;

/// Replaces the stored gradients with those of the mean cross-entropy of
/// the batch. Dropout is active when `rng` is given. Returns the loss.
pub fn xe_gradients(
    model: &mut Captioner,
    visuals: &[&Visual],
    captions: &[&[u32]],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    if visuals.is_empty() {
        return Err(Error::data("empty training batch"));
    }
    let mut g = Graph::new();
    let loss = match rng {
        Some(r) => model.xe_loss_train(&mut g, visuals, captions, r)?,
        None => model.xe_loss(&mut g, visuals, captions)?,
    };
    let grads = g.backward(loss)?;
    let store = model.params_mut();
    store.zero_grad();
    grads.accumulate_into(store);
    Ok(g.value(loss).item())
}

/// One teacher-forced Adam step. Returns the batch loss before the update.
pub fn xe_step(
    model: &mut Captioner,
    adam: &mut Adam,
    visuals: &[&Visual],
    captions: &[&[u32]],
    lr: GroupLr,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let loss = xe_gradients(model, visuals, captions, rng)?;
    adam.apply(model.params_mut(), lr)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScstConfig {
    /// Sampled captions per image; their mean reward is the baseline.
    pub k: usize,
    pub temperature: f64,
}

impl Default for ScstConfig {
    fn default() -> Self {
        ScstConfig { k: 5, temperature: 1.0 }
    }
}

impl ScstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("rl.k must be at least 2 for a mean baseline"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("rl.temperature must be positive"));
        }
        Ok(())
    }
}

/// Replaces the stored gradients with those of the self-critical surrogate
/// `-(1/B) sum_i (1/k) sum_j (r_ij - b_i) log p(s_ij)`, `b_i` the mean
/// reward of image `i`. `samples[i]` and `rewards[i]` hold image `i`'s
/// sampled captions and their rewards. Returns the surrogate value.
pub fn scst_gradients(
    model: &mut Captioner,
    visuals: &[&Visual],
    samples: &[Vec<Decoded>],
    rewards: &[Vec<f64>],
    temperature: f64,
) -> Result<f64> {
    let b = visuals.len();
    if b == 0 || samples.len() != b || rewards.len() != b {
        return Err(Error::data("one sample set and reward set per image required"));
    }
    let mut rows = Vec::new();
    let mut weights_per_row = Vec::new();
    for (i, (ss, rs)) in samples.iter().zip(rewards).enumerate() {
        if ss.len() != rs.len() || ss.is_empty() {
            return Err(Error::data(format!("image {i}: sample and reward counts differ")));
        }
        let k = ss.len() as f64;
        let baseline = rs.iter().sum::<f64>() / k;
        for (s, &r) in ss.iter().zip(rs) {
            rows.push((i, s));
            weights_per_row.push(-(r - baseline) / (k * b as f64));
        }
    }

    let max_len = model.config().max_len;
    let paths: Vec<Vec<u32>> = rows
        .iter()
        .map(|(_, s)| {
            let mut p = s.tokens.clone();
            if s.finished {
                p.push(EOS_ID);
            }
            p.truncate(max_len);
            p
        })
        .collect();
    let t = paths.iter().map(Vec::len).max().unwrap_or(0);
    if t == 0 {
        return Err(Error::data("empty sampled sequence"));
    }
    let mut inputs = Vec::with_capacity(rows.len());
    let mut targets = Vec::with_capacity(rows.len() * t);
    let mut weights = Vec::with_capacity(rows.len() * t);
    for (path, &w) in paths.iter().zip(&weights_per_row) {
        let mut input = vec![BOS_ID];
        input.extend_from_slice(&path[..path.len() - 1]);
        input.resize(t, PAD_ID);
        inputs.push(input);
        for j in 0..t {
            match path.get(j) {
                Some(&tok) => {
                    targets.push(tok as usize);
                    weights.push(w);
                }
                None => {
                    targets.push(EOS_ID as usize);
                    weights.push(0.0);
                }
            }
        }
    }

    let mut g = Graph::new();
    let (memory, n) = model.encode(&mut g, visuals)?;
    let ids: Vec<usize> = rows.iter().flat_map(|&(i, _)| i * n..(i + 1) * n).collect();
    let memory = g.embedding(memory, &ids)?;
    let out = model.decode(&mut g, memory, n, &inputs)?;
    let banned: Vec<usize> = NEVER_GENERATED.iter().map(|&b| b as usize).collect();
    let logp = g.token_log_prob(out.logits, &targets, temperature, &banned)?;
    let loss = g.weighted_sum(logp, &weights)?;
    let grads = g.backward(loss)?;
    let store = model.params_mut();
    store.zero_grad();
    grads.accumulate_into(store);
    Ok(g.value(loss).item())
}

/// Words of a generated caption.
pub fn caption_words(vocab: &Vocabulary, tokens: &[u32]) -> Vec<String> {
    tokens
        .iter()
        .filter(|&&t| !Vocabulary::is_special(t))
        .filter_map(|&t| vocab.token(t).map(str::to_string))
        .collect()
}

/// One self-critical step: sample `k` captions per image, reward each with
/// CIDEr-D against the image's references, update. Returns the mean reward.
#[allow(clippy::too_many_arguments)]
pub fn scst_step(
    model: &mut Captioner,
    adam: &mut Adam,
    visuals: &[&Visual],
    references: &[&[Vec<String>]],
    idf: &IdfTable<String>,
    vocab: &Vocabulary,
    cfg: &ScstConfig,
    lr: GroupLr,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    cfg.validate()?;
    if references.len() != visuals.len() {
        return Err(Error::data("one reference set per image required"));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::data(format!("image {i} of the batch has no references")));
    }
    let rows: Vec<usize> = (0..visuals.len()).flat_map(|i| std::iter::repeat_n(i, cfg.k)).collect();
    let flat = {
        let scorer = ModelScorer::new(model, visuals)?;
        sample_decode(&scorer, &rows, cfg.temperature, rng)?
    };
    let mut samples: Vec<Vec<Decoded>> = vec![Vec::with_capacity(cfg.k); visuals.len()];
    let mut rewards: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.k); visuals.len()];
    for (d, &i) in flat.into_iter().zip(&rows) {
        rewards[i].push(cider_d(&caption_words(vocab, &d.tokens), references[i], idf)?);
        samples[i].push(d);
    }
    scst_gradients(model, visuals, &samples, &rewards, cfg.temperature)?;
    adam.apply(model.params_mut(), lr)?;
    let n = rows.len() as f64;
    Ok(rewards.iter().flatten().sum::<f64>() / n)
}
