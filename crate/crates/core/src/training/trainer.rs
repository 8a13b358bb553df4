use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RlConfig, XeConfig};
use super::data::CaptionDataset;
use super::optim::{Adam, AdamConfig, GroupLr};
use super::schedule::{lambda_lr, EarlyStop, StopDecision};
use super::steps::{caption_words, scst_step, xe_step};
use crate::error::{Error, Result};
use crate::lexicon::{words, Vocabulary};
use crate::metrics::{evaluate_text, EvalReport, IdfTable};
use crate::model::{greedy_decode, Captioner, Checkpoint, Decoded, ModelScorer, Visual};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Xe,
    Rl,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub lr_by_group: GroupLr,
    /// Mean cross-entropy (XE) or mean sampled reward (RL).
    pub loss_or_reward: f64,
    pub val_cider: Option<f64>,
    /// Seconds spent on the epoch.
    pub wallclock: f64,
}

/// A dataset in the form the trainer consumes.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub visuals: Vec<Visual>,
    pub tokens: Vec<Vec<Vec<u32>>>,
    pub references: Vec<Vec<String>>,
    /// Per-image reference word lists, for rewards.
    pub reference_words: Vec<Vec<Vec<String>>>,
}

impl PreparedData {
    pub fn new(ds: &CaptionDataset, vocab: &Vocabulary) -> Self {
        PreparedData {
            visuals: ds.features.iter().cloned().map(Visual::Grid).collect(),
            tokens: ds.tokenized(vocab),
            references: ds.captions.clone(),
            reference_words: ds
                .captions
                .iter()
                .map(|cs| cs.iter().map(|c| words(c)).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.visuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visuals.is_empty()
    }
}

/// Greedy captions for every visual, `batch` images per decode.
pub fn generate_greedy(model: &Captioner, visuals: &[Visual], batch: usize) -> Result<Vec<Decoded>> {
    let mut out = Vec::with_capacity(visuals.len());
    for chunk in visuals.chunks(batch.max(1)) {
        let refs: Vec<&Visual> = chunk.iter().collect();
        out.extend(greedy_decode(&ModelScorer::new(model, &refs)?, refs.len())?);
    }
    Ok(out)
}

/// Greedy decoding scored against the references.
pub fn evaluate_greedy(model: &Captioner, data: &PreparedData, vocab: &Vocabulary) -> Result<EvalReport> {
    let decoded = generate_greedy(model, &data.visuals, 50)?;
    let cands: Vec<String> = decoded.iter().map(|d| caption_words(vocab, &d.tokens).join(" ")).collect();
    evaluate_text(&cands, &data.references)
}

/// Stage, progress and optimizer state; everything needed to resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed epochs of the current stage.
    pub epoch: usize,
    pub early: EarlyStop,
    pub adam: Adam,
    pub seed: u64,
    /// Parameters of the best validation epoch so far.
    pub best: Option<ParamStore>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    stage: Stage,
    epoch: usize,
    early: EarlyStop,
    adam: AdamConfig,
    adam_step: u64,
    seed: u64,
    has_best: bool,
}

/// Runs the two training stages epoch by epoch. Every epoch's shuffling,
/// dropout and sampling draw from a ChaCha stream derived from the seed,
/// the stage and the epoch, so a resumed run repeats an uninterrupted one.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Captioner,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model: Captioner, adam: AdamConfig, seed: u64, patience: usize) -> Result<Self> {
        adam.validate()?;
        let adam = Adam::new(adam, model.params());
        Ok(Trainer {
            model,
            state: TrainState {
                stage: Stage::Xe,
                epoch: 0,
                early: EarlyStop::new(patience),
                adam,
                seed,
                best: None,
            },
        })
    }

    fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed);
        let stage = match self.state.stage {
            Stage::Xe => 0u64,
            Stage::Rl => 1,
        };
        rng.set_stream((stage << 32) | (self.state.epoch as u64 + 1));
        rng
    }

    /// Scores the epoch on `val` and keeps the parameters if they are the
    /// best so far.
    fn validate(&mut self, val: Option<(&PreparedData, &Vocabulary)>) -> Result<(Option<f64>, StopDecision)> {
        let Some((val, vocab)) = val else {
            return Ok((None, StopDecision::Continue));
        };
        let cider = evaluate_greedy(&self.model, val, vocab)?.cider_d;
        let (improved, decision) = self.state.early.update(cider);
        if improved {
            self.state.best = Some(self.model.params().clone());
        }
        Ok((Some(cider), decision))
    }

    pub fn xe_epoch(
        &mut self,
        train: &PreparedData,
        val: Option<(&PreparedData, &Vocabulary)>,
        cfg: &XeConfig,
    ) -> Result<EpochLog> {
        if self.state.stage != Stage::Xe {
            return Err(Error::config("the cross-entropy stage is already over"));
        }
        cfg.validate()?;
        let start = Instant::now();
        let n = self.state.epoch + 1;
        let base = cfg.base_lr();
        let lr = GroupLr {
            encoder: lambda_lr(n, base.encoder)?,
            other: lambda_lr(n, base.other)?,
        };
        let mut pairs: Vec<(usize, usize)> = train
            .tokens
            .iter()
            .enumerate()
            .flat_map(|(i, caps)| (0..caps.len()).map(move |j| (i, j)))
            .collect();
        if pairs.is_empty() {
            return Err(Error::data("no training captions"));
        }
        let mut rng = self.epoch_rng();
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in pairs.chunks(cfg.batch_size) {
            let visuals: Vec<&Visual> = batch.iter().map(|&(i, _)| &train.visuals[i]).collect();
            let caps: Vec<&[u32]> = batch.iter().map(|&(i, j)| train.tokens[i][j].as_slice()).collect();
            total += xe_step(&mut self.model, &mut self.state.adam, &visuals, &caps, lr, Some(&mut rng))?;
            steps += 1;
        }
        self.state.epoch = n;
        let (val_cider, _) = self.validate(val)?;
        Ok(EpochLog {
            stage: Stage::Xe,
            epoch: n,
            lr_by_group: lr,
            loss_or_reward: total / steps as f64,
            val_cider,
            wallclock: start.elapsed().as_secs_f64(),
        })
    }

    /// Switches to the RL stage, starting from the best XE parameters when
    /// validation ran, with fresh optimizer moments.
    pub fn start_rl(&mut self, patience: usize) {
        if let Some(best) = self.state.best.take() {
            *self.model.params_mut() = best;
        }
        self.state.stage = Stage::Rl;
        self.state.epoch = 0;
        self.state.early = EarlyStop::new(patience);
        self.state.adam = Adam::new(self.state.adam.config.clone(), self.model.params());
    }

    pub fn rl_epoch(
        &mut self,
        train: &PreparedData,
        idf: &IdfTable<String>,
        vocab: &Vocabulary,
        val: Option<(&PreparedData, &Vocabulary)>,
        cfg: &RlConfig,
    ) -> Result<(EpochLog, StopDecision)> {
        if self.state.stage != Stage::Rl {
            return Err(Error::config("call start_rl before running RL epochs"));
        }
        cfg.validate()?;
        let start = Instant::now();
        let n = self.state.epoch + 1;
        let scst = cfg.scst();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = self.epoch_rng();
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let visuals: Vec<&Visual> = batch.iter().map(|&i| &train.visuals[i]).collect();
            let refs: Vec<&[Vec<String>]> = batch.iter().map(|&i| train.reference_words[i].as_slice()).collect();
            total += scst_step(
                &mut self.model,
                &mut self.state.adam,
                &visuals,
                &refs,
                idf,
                vocab,
                &scst,
                cfg.lr(),
                &mut rng,
            )?;
            steps += 1;
        }
        self.state.epoch = n;
        let (val_cider, decision) = self.validate(val)?;
        Ok((
            EpochLog {
                stage: Stage::Rl,
                epoch: n,
                lr_by_group: cfg.lr(),
                loss_or_reward: total / steps.max(1) as f64,
                val_cider,
                wallclock: start.elapsed().as_secs_f64(),
            },
            decision,
        ))
    }

    /// Model with the best validation parameters (the current ones if
    /// validation never ran).
    pub fn best_model(&self) -> Captioner {
        let mut m = self.model.clone();
        if let Some(best) = &self.state.best {
            *m.params_mut() = best.clone();
        }
        m
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = StateMeta {
            stage: self.state.stage,
            epoch: self.state.epoch,
            early: self.state.early.clone(),
            adam: self.state.adam.config.clone(),
            adam_step: self.state.adam.step,
            seed: self.state.seed,
            has_best: self.state.best.is_some(),
        };
        let mut extra = self.state.adam.state_tensors(self.model.params());
        if let Some(best) = &self.state.best {
            extra.extend(best.iter().map(|(_, p)| (format!("best/{}", p.name), p.tensor.clone())));
        }
        self.model.to_checkpoint(serde_json::json!({ "train_state": meta }), extra)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = Captioner::from_checkpoint(ckpt)?;
        let meta: StateMeta = serde_json::from_value(
            ckpt.meta
                .pointer("/extra/train_state")
                .cloned()
                .ok_or_else(|| Error::data("checkpoint has no training state; it is not a training checkpoint"))?,
        )?;
        let find = |name: &str| ckpt.tensor(name).cloned();
        let adam = Adam::from_state(meta.adam, meta.adam_step, model.params(), find)?;
        let best = if meta.has_best {
            let mut store = model.params().clone();
            let values: Vec<(String, Tensor)> = store
                .iter()
                .map(|(_, p)| {
                    let name = format!("best/{}", p.name);
                    find(&name)
                        .map(|t| (p.name.clone(), t))
                        .ok_or_else(|| Error::data(format!("checkpoint lacks `{name}`")))
                })
                .collect::<Result<_>>()?;
            for (name, t) in values {
                let id = store.id(&name).expect("name from the store");
                store.get_mut(id).tensor = t;
            }
            Some(store)
        } else {
            None
        };
        Ok(Trainer {
            model,
            state: TrainState {
                stage: meta.stage,
                epoch: meta.epoch,
                early: meta.early,
                adam,
                seed: meta.seed,
                best,
            },
        })
    }
}

/// Idf table over training references, for CIDEr-D rewards.
pub fn reward_idf(train: &PreparedData) -> Result<IdfTable<String>> {
    IdfTable::build(&train.reference_words)
}
