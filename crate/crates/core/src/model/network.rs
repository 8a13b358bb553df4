use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, PrototypeMode};
use super::features::{GridFeatures, Image};
use crate::error::{Error, Result};
use crate::lexicon::{BOS_ID, EOS_ID, PAD_ID};
use crate::numerics::{AttentionLayout, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use crate::prototype_tree::PrototypeTree;

/// Visual input of one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Visual {
    Grid(GridFeatures),
    Image(Image),
}

impl Visual {
    pub fn layout(&self) -> Option<(usize, usize)> {
        match self {
            Visual::Grid(g) => g.layout(),
            Visual::Image(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Attention sublayer, then feed-forward sublayer, each followed by a
/// residual layer norm. Used for the encoder and the prototype blocks.
#[derive(Clone, Debug)]
struct Block {
    attn: AttnIds,
    ln1: LnIds,
    ffn: FfnIds,
    ln2: LnIds,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: AttnIds,
    ln1: LnIds,
    cross: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
    ln3: LnIds,
}

#[derive(Clone, Debug)]
struct Encoder {
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
}

/// Decoder outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `[batch * len, vocab]`.
    pub logits: Var,
    /// Last layer's cross-attention node; see [`Graph::attention_probs`].
    pub cross_attention: Var,
}

/// The captioning network: optional toy encoder, prototype aggregation
/// stack, transformer decoder.
#[derive(Clone, Debug)]
pub struct Captioner {
    config: ModelConfig,
    params: ParamStore,
    /// 0-based tree level used by each aggregation block.
    block_levels: Vec<usize>,
    /// Prototype table per distinct level.
    protos: BTreeMap<usize, ParamId>,
    proto_proj: Option<(ParamId, ParamId)>,
    blocks: Vec<Block>,
    encoder: Option<Encoder>,
    tok: ParamId,
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Inverted dropout on sublayer outputs; inactive without an rng.
struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Dropout<'_> {
    fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let shape = g.value(x).shape().to_vec();
        let n = g.value(x).len();
        let mask = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = g.input(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    group: ParamGroup,
}

impl Init<'_> {
    fn add(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        self.store.add(name, t, self.group)
    }

    fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::uniform(&[fan_in, fan_out], bound, &mut self.rng);
        self.add(name, t)
    }

    fn row(&mut self, name: &str, d: usize, v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(&[1, d], v))
    }

    fn attn(&mut self, p: &str, d: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            wq: self.glorot(&format!("{p}.wq"), d, d)?,
            wk: self.glorot(&format!("{p}.wk"), d, d)?,
            wv: self.glorot(&format!("{p}.wv"), d, d)?,
            wo: self.glorot(&format!("{p}.wo"), d, d)?,
            bo: self.row(&format!("{p}.bo"), d, 0.0)?,
        })
    }

    fn ln(&mut self, p: &str, d: usize) -> Result<LnIds> {
        Ok(LnIds {
            g: self.row(&format!("{p}.g"), d, 1.0)?,
            b: self.row(&format!("{p}.b"), d, 0.0)?,
        })
    }

    fn ffn(&mut self, p: &str, d: usize, d_ff: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.glorot(&format!("{p}.w1"), d, d_ff)?,
            b1: self.row(&format!("{p}.b1"), d_ff, 0.0)?,
            w2: self.glorot(&format!("{p}.w2"), d_ff, d)?,
            b2: self.row(&format!("{p}.b2"), d, 0.0)?,
        })
    }

    fn block(&mut self, p: &str, d: usize, d_ff: usize) -> Result<Block> {
        Ok(Block {
            attn: self.attn(&format!("{p}.attn"), d)?,
            ln1: self.ln(&format!("{p}.ln1"), d)?,
            ffn: self.ffn(&format!("{p}.ffn"), d, d_ff)?,
            ln2: self.ln(&format!("{p}.ln2"), d)?,
        })
    }
}

impl Captioner {
    /// Fresh model. A non-empty schedule needs the prototype tree; its
    /// centroids initialise the prototype tables.
    pub fn new(config: ModelConfig, tree: Option<&PrototypeTree>) -> Result<Self> {
        config.validate()?;
        let (levels, protos) = match tree {
            Some(t) => {
                let levels = config.schedule.resolve(t)?;
                let mut protos = BTreeMap::new();
                for &l in &levels {
                    protos.insert(l, t.centroids(l)?);
                }
                (levels, protos)
            }
            None if config.schedule.is_empty() => (Vec::new(), BTreeMap::new()),
            None => return Err(Error::config("a prototype tree is required for a non-empty schedule")),
        };
        Self::build(config, levels, protos)
    }

    /// Model with the given block levels and prototype tables.
    pub fn build(config: ModelConfig, block_levels: Vec<usize>, protos: BTreeMap<usize, Tensor>) -> Result<Self> {
        config.validate()?;
        if block_levels.len() != config.schedule.len() || block_levels.iter().any(|l| !protos.contains_key(l)) {
            return Err(Error::config("block levels do not match the schedule or prototype tables"));
        }
        let (d, d_ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
            group: ParamGroup::Encoder,
        };

        let encoder = match &config.encoder {
            Some(e) => Some(Encoder {
                patch_w: init.glorot("enc.patch.w", e.patch_dim(), d)?,
                patch_b: init.row("enc.patch.b", d, 0.0)?,
                pos: {
                    let t = Tensor::randn(&[e.n_patches(), d], 1.0 / (d as f64).sqrt(), &mut init.rng);
                    init.add("enc.pos", t)?
                },
                blocks: (0..e.blocks)
                    .map(|i| init.block(&format!("enc.{i}"), d, d_ff))
                    .collect::<Result<_>>()?,
            }),
            None => None,
        };

        init.group = ParamGroup::Other;
        let mut proto_ids = BTreeMap::new();
        let mut d_emb = None;
        for (&l, t) in &protos {
            let (_, w) = t.dims2()?;
            if d_emb.is_some_and(|e| e != w) {
                return Err(Error::shape("prototype levels differ in width"));
            }
            d_emb = Some(w);
            proto_ids.insert(l, init.add(&format!("proto.L{}", l + 1), t.clone())?);
        }
        let proto_proj = match d_emb {
            Some(e) => Some((init.glorot("proto.proj.w", e, d)?, init.row("proto.proj.b", d, 0.0)?)),
            None => None,
        };
        let blocks = (0..block_levels.len())
            .map(|i| init.block(&format!("pa.{i}"), d, d_ff))
            .collect::<Result<Vec<_>>>()?;

        let std = 1.0 / (d as f64).sqrt();
        let tok = {
            let t = Tensor::randn(&[v, d], std, &mut init.rng);
            init.add("dec.tok", t)?
        };
        let pos = {
            let t = Tensor::randn(&[config.max_len, d], std, &mut init.rng);
            init.add("dec.pos", t)?
        };
        let layers = (0..config.decoder_layers)
            .map(|j| {
                Ok(DecoderLayer {
                    self_attn: init.attn(&format!("dec.{j}.self"), d)?,
                    ln1: init.ln(&format!("dec.{j}.ln1"), d)?,
                    cross: init.attn(&format!("dec.{j}.cross"), d)?,
                    ln2: init.ln(&format!("dec.{j}.ln2"), d)?,
                    ffn: init.ffn(&format!("dec.{j}.ffn"), d, d_ff)?,
                    ln3: init.ln(&format!("dec.{j}.ln3"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out_w = init.glorot("dec.out.w", d, v)?;
        let out_b = init.row("dec.out.b", v, 0.0)?;

        if config.prototype_mode == PrototypeMode::Frozen {
            for &id in proto_ids.values() {
                store.set_frozen(id, true);
            }
        }
        Ok(Captioner {
            config,
            params: store,
            block_levels,
            protos: proto_ids,
            proto_proj,
            blocks,
            encoder,
            tok,
            pos,
            layers,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn block_levels(&self) -> &[usize] {
        &self.block_levels
    }

    /// Ids of the prototype tables, by 0-based tree level.
    pub fn prototype_params(&self) -> impl Iterator<Item = (usize, ParamId)> + '_ {
        self.protos.iter().map(|(&l, &id)| (l, id))
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn mha(&self, g: &mut Graph, a: &AttnIds, x: Var, kv: Var, layout: AttentionLayout) -> Result<(Var, Var)> {
        let (wq, wk, wv, wo, bo) = (
            self.p(g, a.wq),
            self.p(g, a.wk),
            self.p(g, a.wv),
            self.p(g, a.wo),
            self.p(g, a.bo),
        );
        let q = g.matmul(x, wq)?;
        let k = g.matmul(kv, wk)?;
        let v = g.matmul(kv, wv)?;
        let att = g.attention(q, k, v, layout)?;
        let out = g.linear(att, wo, Some(bo))?;
        Ok((out, att))
    }

    fn ln(&self, g: &mut Graph, l: &LnIds, x: Var) -> Result<Var> {
        let (gain, bias) = (self.p(g, l.g), self.p(g, l.b));
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    fn ffn(&self, g: &mut Graph, f: &FfnIds, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (self.p(g, f.w1), self.p(g, f.b1), self.p(g, f.w2), self.p(g, f.b2));
        g.feed_forward(x, w1, b1, w2, b2)
    }

    /// `x1 = LN(x + MHA(x, kv)); out = LN(x1 + FFN(x1))`.
    fn block(
        &self,
        g: &mut Graph,
        b: &Block,
        x: Var,
        kv: Var,
        layout: AttentionLayout,
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let (a, att) = self.mha(g, &b.attn, x, kv, layout)?;
        let a = drop.apply(g, a)?;
        let s = g.add(x, a)?;
        let x1 = self.ln(g, &b.ln1, s)?;
        let f = self.ffn(g, &b.ffn, x1)?;
        let f = drop.apply(g, f)?;
        let s = g.add(x1, f)?;
        Ok((self.ln(g, &b.ln2, s)?, att))
    }

    /// Stacks the batch's visual input into `[batch * n_grid, d_model]`
    /// grid features. Returns the node and `n_grid`.
    pub fn grid_features(&self, g: &mut Graph, batch: &[&Visual]) -> Result<(Var, usize)> {
        self.grid_features_with(g, batch, &mut Dropout::off())
    }

    fn grid_features_with(&self, g: &mut Graph, batch: &[&Visual], drop: &mut Dropout) -> Result<(Var, usize)> {
        let first = batch.first().ok_or_else(|| Error::data("empty batch"))?;
        let d = self.config.d_model;
        match first {
            Visual::Grid(f0) => {
                let n = f0.n_grid();
                let mut data = Vec::with_capacity(batch.len() * n * d);
                for v in batch {
                    let Visual::Grid(f) = v else {
                        return Err(Error::data("a batch cannot mix images and grid features"));
                    };
                    if f.dim() != d {
                        return Err(Error::shape(format!("grid features have width {} but the model uses {d}", f.dim())));
                    }
                    if f.n_grid() != n {
                        return Err(Error::shape("every sample in a batch needs the same number of grid cells"));
                    }
                    data.extend_from_slice(f.features().data());
                }
                Ok((g.input(Tensor::new(vec![batch.len() * n, d], data)?), n))
            }
            Visual::Image(_) => {
                let enc = self.encoder.as_ref().ok_or_else(|| Error::config("images need model.encoder"))?;
                let cfg = self.config.encoder.as_ref().expect("encoder config");
                let n = cfg.n_patches();
                let mut data = Vec::with_capacity(batch.len() * n * cfg.patch_dim());
                for v in batch {
                    let Visual::Image(img) = v else {
                        return Err(Error::data("a batch cannot mix images and grid features"));
                    };
                    if (img.height(), img.width()) != (cfg.image_height, cfg.image_width) {
                        return Err(Error::shape(format!(
                            "image is {}x{} but the encoder expects {}x{}",
                            img.height(),
                            img.width(),
                            cfg.image_height,
                            cfg.image_width
                        )));
                    }
                    data.extend_from_slice(img.patchify(cfg.patch)?.data());
                }
                let patches = g.input(Tensor::new(vec![batch.len() * n, cfg.patch_dim()], data)?);
                let (w, b, pos) = (self.p(g, enc.patch_w), self.p(g, enc.patch_b), self.p(g, enc.pos));
                let x = g.linear(patches, w, Some(b))?;
                let mut x = g.add_tiled(x, pos)?;
                let layout = AttentionLayout {
                    batch: batch.len(),
                    q_len: n,
                    kv_len: n,
                    heads: self.config.heads,
                    shared_kv: false,
                    causal: false,
                };
                for blk in &enc.blocks {
                    x = self.block(g, blk, x, x, layout, drop)?.0;
                }
                Ok((x, n))
            }
        }
    }

    /// Projected prototypes `Z_l W_p + b_p` of tree level `level`.
    pub fn prototypes(&self, g: &mut Graph, level: usize) -> Result<Var> {
        let id = *self
            .protos
            .get(&level)
            .ok_or_else(|| Error::config(format!("model has no prototypes for level L{}", level + 1)))?;
        let (w, b) = self.proto_proj.expect("prototype projection exists with prototypes");
        let z = self.p(g, id);
        let (w, b) = (self.p(g, w), self.p(g, b));
        g.linear(z, w, Some(b))
    }

    /// Runs grid features `[batch * n_grid, d]` through the aggregation
    /// blocks. Returns the output and each block's attention node.
    pub fn aggregate(&self, g: &mut Graph, grid: Var, batch: usize, n_grid: usize) -> Result<(Var, Vec<Var>)> {
        self.aggregate_with(g, grid, batch, n_grid, &mut Dropout::off())
    }

    fn aggregate_with(
        &self,
        g: &mut Graph,
        grid: Var,
        batch: usize,
        n_grid: usize,
        drop: &mut Dropout,
    ) -> Result<(Var, Vec<Var>)> {
        let mut x = grid;
        let mut cache: BTreeMap<usize, Var> = BTreeMap::new();
        let mut atts = Vec::with_capacity(self.blocks.len());
        for (blk, &level) in self.blocks.iter().zip(&self.block_levels) {
            let z = match cache.get(&level) {
                Some(&z) => z,
                None => {
                    let z = self.prototypes(g, level)?;
                    cache.insert(level, z);
                    z
                }
            };
            let layout = AttentionLayout {
                batch,
                q_len: n_grid,
                kv_len: g.value(z).n_rows(),
                heads: self.config.heads,
                shared_kv: true,
                causal: false,
            };
            let (y, att) = self.block(g, blk, x, z, layout, drop)?;
            x = y;
            atts.push(att);
        }
        Ok((x, atts))
    }

    /// Grid features followed by aggregation: `[batch * n_grid, d]`.
    pub fn encode(&self, g: &mut Graph, batch: &[&Visual]) -> Result<(Var, usize)> {
        self.encode_with(g, batch, &mut Dropout::off())
    }

    fn encode_with(&self, g: &mut Graph, batch: &[&Visual], drop: &mut Dropout) -> Result<(Var, usize)> {
        let (grid, n) = self.grid_features_with(g, batch, drop)?;
        Ok((self.aggregate_with(g, grid, batch.len(), n, drop)?.0, n))
    }

    /// Teacher-forced decoder over `inputs` (equal-length token rows).
    pub fn decode(&self, g: &mut Graph, memory: Var, n_grid: usize, inputs: &[Vec<u32>]) -> Result<DecoderOutput> {
        self.decode_with(g, memory, n_grid, inputs, &mut Dropout::off())
    }

    fn decode_with(
        &self,
        g: &mut Graph,
        memory: Var,
        n_grid: usize,
        inputs: &[Vec<u32>],
        drop: &mut Dropout,
    ) -> Result<DecoderOutput> {
        let batch = inputs.len();
        let t = inputs.first().map_or(0, Vec::len);
        if batch == 0 || t == 0 || inputs.iter().any(|r| r.len() != t) {
            return Err(Error::shape("decoder inputs must be non-empty rows of equal length"));
        }
        if t > self.config.max_len {
            return Err(Error::shape(format!(
                "decoder input of length {t} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if g.value(memory).n_rows() != batch * n_grid {
            return Err(Error::shape("memory rows do not match batch x grid cells"));
        }
        let v = self.config.vocab_size;
        let ids: Vec<usize> = inputs.iter().flatten().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::OutOfRange { index: bad, len: v });
        }
        let (tok, pos) = (self.p(g, self.tok), self.p(g, self.pos));
        let x = g.embedding(tok, &ids)?;
        let pos = g.slice_rows(pos, 0, t)?;
        let x = g.add_tiled(x, pos)?;
        let mut x = drop.apply(g, x)?;
        let self_layout = AttentionLayout {
            batch,
            q_len: t,
            kv_len: t,
            heads: self.config.heads,
            shared_kv: false,
            causal: true,
        };
        let cross_layout = AttentionLayout {
            kv_len: n_grid,
            causal: false,
            ..self_layout
        };
        let mut cross_attention = None;
        for layer in &self.layers {
            let (a, _) = self.mha(g, &layer.self_attn, x, x, self_layout)?;
            let a = drop.apply(g, a)?;
            let s = g.add(x, a)?;
            let x1 = self.ln(g, &layer.ln1, s)?;
            let (c, att) = self.mha(g, &layer.cross, x1, memory, cross_layout)?;
            cross_attention = Some(att);
            let c = drop.apply(g, c)?;
            let s = g.add(x1, c)?;
            let x2 = self.ln(g, &layer.ln2, s)?;
            let f = self.ffn(g, &layer.ffn, x2)?;
            let f = drop.apply(g, f)?;
            let s = g.add(x2, f)?;
            x = self.ln(g, &layer.ln3, s)?;
        }
        let (w, b) = (self.p(g, self.out_w), self.p(g, self.out_b));
        let logits = g.linear(x, w, Some(b))?;
        Ok(DecoderOutput {
            logits,
            cross_attention: cross_attention.expect("at least one decoder layer"),
        })
    }

    /// `<bos> w1 .. wn` inputs, `w1 .. wn <eos>` targets, right-padded to the
    /// batch's longest caption. Captions longer than `max_len - 1` words are
    /// cut.
    pub fn teacher_forcing(&self, captions: &[&[u32]]) -> Result<(Vec<Vec<u32>>, Vec<usize>, Vec<bool>)> {
        let cap = self.config.max_len - 1;
        let t = captions.iter().map(|c| c.len().min(cap)).max().unwrap_or(0) + 1;
        let mut inputs = Vec::with_capacity(captions.len());
        let mut targets = Vec::with_capacity(captions.len() * t);
        let mut mask = Vec::with_capacity(captions.len() * t);
        for c in captions {
            let words = &c[..c.len().min(cap)];
            if let Some(&bad) = words.iter().find(|&&w| w == PAD_ID || w == BOS_ID || w as usize >= self.config.vocab_size) {
                return Err(Error::data(format!("caption token {bad} cannot be a training target")));
            }
            let mut row = vec![BOS_ID];
            row.extend_from_slice(words);
            row.resize(t, PAD_ID);
            inputs.push(row);
            for i in 0..t {
                let (target, live) = match i.cmp(&words.len()) {
                    std::cmp::Ordering::Less => (words[i], true),
                    std::cmp::Ordering::Equal => (EOS_ID, true),
                    std::cmp::Ordering::Greater => (PAD_ID, false),
                };
                targets.push(target as usize);
                mask.push(live);
            }
        }
        Ok((inputs, targets, mask))
    }

    /// Mean cross-entropy over every non-pad target position of the batch.
    pub fn xe_loss(&self, g: &mut Graph, batch: &[&Visual], captions: &[&[u32]]) -> Result<Var> {
        self.xe_loss_with(g, batch, captions, &mut Dropout::off())
    }

    /// [`Captioner::xe_loss`] with `model.dropout` active, masks drawn
    /// from `rng`.
    pub fn xe_loss_train(&self, g: &mut Graph, batch: &[&Visual], captions: &[&[u32]], rng: &mut ChaCha8Rng) -> Result<Var> {
        let mut drop = Dropout {
            p: self.config.dropout,
            rng: Some(rng),
        };
        self.xe_loss_with(g, batch, captions, &mut drop)
    }

    fn xe_loss_with(&self, g: &mut Graph, batch: &[&Visual], captions: &[&[u32]], drop: &mut Dropout) -> Result<Var> {
        if batch.len() != captions.len() {
            return Err(Error::data("one caption per sample required"));
        }
        let (memory, n) = self.encode_with(g, batch, drop)?;
        let (inputs, targets, mask) = self.teacher_forcing(captions)?;
        let out = self.decode_with(g, memory, n, &inputs, drop)?;
        g.cross_entropy(out.logits, &targets, &mask)
    }

    /// Aggregated grid features as a plain tensor (no gradient).
    pub fn memory(&self, batch: &[&Visual]) -> Result<(Tensor, usize)> {
        let mut g = Graph::new();
        let (m, n) = self.encode(&mut g, batch)?;
        Ok((g.value(m).clone(), n))
    }

    /// Overwrites every parameter with the value of the same name; names and
    /// shapes must match exactly.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::data(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (name, t) in values {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| Error::data(format!("unknown parameter `{name}`")))?;
            let p = self.params.get_mut(id);
            if p.tensor.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    p.tensor.shape(),
                    t.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }
}
