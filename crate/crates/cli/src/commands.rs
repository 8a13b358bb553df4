use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use protocap::lexicon::{load_embeddings, write_embeddings_text, ConceptList, Vocabulary};
use protocap::metrics::evaluate_text;
use protocap::model::{attention_maps, beam_decode, Captioner, Checkpoint, Decoded, Dtype, ModelScorer, Visual};
use protocap::prototype_tree::{build_tree, PrototypeTree};
use protocap::synthetic::{gen_toy_dataset, ToyDataset, ToyWorld};
use protocap::training::{
    caption_words, generate_greedy, reward_idf, CaptionDataset, EpochLog, PreparedData, StopDecision, Trainer,
};
use protocap::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::Manifest;

const DECODE_BATCH: usize = 50;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Fails unless `path` exists, naming what produces it.
fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "{what} not found at {}; run `protocap {producer}` first",
            path.display()
        )))
    }
}

struct Paths<'a>(&'a RunConfig);

impl Paths<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.0.out_dir.join(name)
    }

    fn synthetic(&self, name: &str) -> PathBuf {
        self.0.out_dir.join("synthetic").join(name)
    }

    fn vocab(&self) -> PathBuf {
        self.out("vocab.txt")
    }

    fn tree(&self) -> PathBuf {
        self.out("tree.json")
    }

    fn xe(&self) -> PathBuf {
        self.out("xe.ckpt")
    }

    fn rl(&self) -> PathBuf {
        self.out("rl.ckpt")
    }

    fn split(&self, train: bool) -> (PathBuf, PathBuf) {
        let d = &self.0.data;
        let (grid, caps, name) = if train {
            (&d.train_grid, &d.train_captions, "train")
        } else {
            (&d.val_grid, &d.val_captions, "val")
        };
        (
            grid.clone().unwrap_or_else(|| self.synthetic(&format!("{name}.grid"))),
            caps.clone().unwrap_or_else(|| self.synthetic(&format!("{name}.tsv"))),
        )
    }
}

fn load_split(cfg: &RunConfig, train: bool, m: &mut Manifest) -> Result<CaptionDataset> {
    let (grid, caps) = Paths(cfg).split(train);
    let key = if train { "data.train" } else { "data.val" };
    for p in [&grid, &caps] {
        if !p.is_file() {
            return Err(Error::Data(format!(
                "dataset file {} not found; set {key}_grid/{key}_captions or run `protocap gen-synthetic` first",
                p.display()
            )));
        }
        m.input(p)?;
    }
    let ds = CaptionDataset::load(&grid, &caps)?;
    ds.require_references()?;
    Ok(ds)
}

fn load_vocab(cfg: &RunConfig, m: &mut Manifest) -> Result<Vocabulary> {
    let p = Paths(cfg).vocab();
    require(&p, "vocabulary", "build-vocab")?;
    m.input(&p)?;
    Vocabulary::load(&p)
}

fn load_tree(cfg: &RunConfig, m: &mut Manifest) -> Result<PrototypeTree> {
    let p = Paths(cfg).tree();
    require(&p, "prototype tree", "build-tree")?;
    m.input(&p)?;
    PrototypeTree::load_json(&p)
}

pub fn gen_synthetic(cfg: &RunConfig) -> Result<Manifest> {
    let mut m = Manifest::new("gen-synthetic", cfg)?;
    let paths = Paths(cfg);
    let world = ToyWorld::new(cfg.synthetic.world(cfg.seed))?;
    let ds = gen_toy_dataset(&world, cfg.synthetic.n_train, cfg.synthetic.n_val)?;
    for (name, samples) in [("train", &ds.train), ("val", &ds.val)] {
        let (grid, caps) = (paths.synthetic(&format!("{name}.grid")), paths.synthetic(&format!("{name}.tsv")));
        write(&grid, [])?;
        ToyDataset::split(samples).save(&grid, &caps)?;
        m.output(&grid)?;
        m.output(&caps)?;
    }

    let concepts = paths.synthetic("concepts.txt");
    let mut text = String::new();
    for c in world.concepts() {
        writeln!(text, "{c}").expect("writing to a string");
    }
    write(&concepts, text)?;
    m.output(&concepts)?;

    let emb = world.concept_embeddings()?;
    let emb_path = paths.synthetic("embeddings.txt");
    write_embeddings_text(&emb_path, emb.concepts().tokens(), emb.matrix())?;
    m.output(&emb_path)?;

    #[derive(Serialize)]
    struct WorldInfo<'a> {
        config: &'a protocap::synthetic::ToyWorldConfig,
        concepts: &'a [String],
        cells: Vec<&'a [usize]>,
    }
    let info = WorldInfo {
        config: world.config(),
        concepts: world.concepts(),
        cells: (0..world.concepts().len()).map(|c| world.cells(c)).collect(),
    };
    let world_path = paths.synthetic("world.json");
    write(&world_path, serde_json::to_string_pretty(&info)? + "\n")?;
    m.output(&world_path)?;
    Ok(m)
}

pub fn build_vocab(cfg: &RunConfig) -> Result<Manifest> {
    let mut m = Manifest::new("build-vocab", cfg)?;
    let ds = load_split(cfg, true, &mut m)?;
    let vocab = Vocabulary::build(ds.captions.iter().flatten(), cfg.vocab.min_count)?;
    let p = Paths(cfg).vocab();
    write(&p, [])?;
    vocab.save(&p)?;
    m.output(&p)?;
    eprintln!("vocabulary: {} tokens", vocab.len());
    Ok(m)
}

pub fn build_tree_cmd(cfg: &RunConfig) -> Result<Manifest> {
    let mut m = Manifest::new("build-tree", cfg)?;
    let paths = Paths(cfg);
    let vocab = load_vocab(cfg, &mut m)?;
    let concepts_path = cfg.tree.concepts.clone().unwrap_or_else(|| paths.synthetic("concepts.txt"));
    let emb_path = cfg.tree.embeddings.clone().unwrap_or_else(|| paths.synthetic("embeddings.txt"));
    for (p, key) in [(&concepts_path, "tree.concepts"), (&emb_path, "tree.embeddings")] {
        if !p.is_file() {
            return Err(Error::Data(format!(
                "{} not found; set {key} or run `protocap gen-synthetic` first",
                p.display()
            )));
        }
        m.input(p)?;
    }
    let concepts = ConceptList::load(&concepts_path, &vocab)?;
    let emb = load_embeddings(&emb_path, &concepts, cfg.tree.max_miss_rate)?;
    if !emb.missing().is_empty() {
        eprintln!("{} concepts have no embedding and were dropped", emb.missing().len());
    }
    let tree = build_tree(&emb, &cfg.tree.level_sizes, &cfg.tree.cluster(cfg.seed))?;
    let p = paths.tree();
    write(&p, [])?;
    tree.save_json(&p)?;
    m.output(&p)?;
    eprintln!("tree level sizes: {:?}", tree.level_sizes());
    Ok(m)
}

fn log_epoch(log: &EpochLog, path: &Path, text: &mut String) -> Result<()> {
    let line = serde_json::to_string(log)?;
    eprintln!("{line}");
    text.push_str(&line);
    text.push('\n');
    write(path, text.as_bytes())
}

fn save_trainer(t: &Trainer, path: &Path) -> Result<()> {
    write(path, [])?;
    t.to_checkpoint()?.save(path, Dtype::F64)
}

pub fn train_xe(cfg: &RunConfig) -> Result<Manifest> {
    let mut m = Manifest::new("train-xe", cfg)?;
    let paths = Paths(cfg);
    let vocab = load_vocab(cfg, &mut m)?;
    let tree = if cfg.model.schedule.is_empty() {
        None
    } else {
        Some(load_tree(cfg, &mut m)?)
    };
    let train = PreparedData::new(&load_split(cfg, true, &mut m)?, &vocab);
    let val = PreparedData::new(&load_split(cfg, false, &mut m)?, &vocab);
    let model = Captioner::new(cfg.model.model_config(vocab.len(), cfg.seed), tree.as_ref())?;
    let mut t = Trainer::new(model, cfg.adam.clone(), cfg.seed, cfg.rl.patience)?;
    let log_path = paths.out("xe_log.jsonl");
    let mut log = String::new();
    for _ in 0..cfg.xe.epochs {
        let e = t.xe_epoch(&train, Some((&val, &vocab)), &cfg.xe)?;
        log_epoch(&e, &log_path, &mut log)?;
    }
    let p = paths.xe();
    save_trainer(&t, &p)?;
    m.output(&p)?;
    m.logs.push(log_path.display().to_string());
    Ok(m)
}

pub fn train_rl(cfg: &RunConfig) -> Result<Manifest> {
    let mut m = Manifest::new("train-rl", cfg)?;
    let paths = Paths(cfg);
    let xe = paths.xe();
    require(&xe, "cross-entropy checkpoint", "train-xe")?;
    m.input(&xe)?;
    let vocab = load_vocab(cfg, &mut m)?;
    let mut t = Trainer::from_checkpoint(&Checkpoint::load(&xe)?)?;
    if t.model.config().vocab_size != vocab.len() {
        return Err(Error::Data("checkpoint and vocabulary sizes differ; rerun `protocap train-xe`".into()));
    }
    let train = PreparedData::new(&load_split(cfg, true, &mut m)?, &vocab);
    let val = PreparedData::new(&load_split(cfg, false, &mut m)?, &vocab);
    let idf = reward_idf(&train)?;
    t.start_rl(cfg.rl.patience);
    let log_path = paths.out("rl_log.jsonl");
    let mut log = String::new();
    for _ in 0..cfg.rl.epochs {
        let (e, decision) = t.rl_epoch(&train, &idf, &vocab, Some((&val, &vocab)), &cfg.rl)?;
        log_epoch(&e, &log_path, &mut log)?;
        if decision == StopDecision::Stop {
            eprintln!("early stop after RL epoch {}", e.epoch);
            break;
        }
    }
    let p = paths.rl();
    save_trainer(&t, &p)?;
    m.output(&p)?;
    m.logs.push(log_path.display().to_string());
    Ok(m)
}

/// The model `eval` and `generate` use: best parameters of the selected
/// checkpoint.
fn load_model(cfg: &RunConfig, m: &mut Manifest) -> Result<Captioner> {
    let paths = Paths(cfg);
    let path = match cfg.decode.checkpoint.as_str() {
        "auto" if paths.rl().is_file() => paths.rl(),
        "auto" | "xe" => {
            require(&paths.xe(), "cross-entropy checkpoint", "train-xe")?;
            paths.xe()
        }
        "rl" => {
            require(&paths.rl(), "RL checkpoint", "train-rl")?;
            paths.rl()
        }
        other => {
            let p = PathBuf::from(other);
            require(&p, "checkpoint", "train-xe")?;
            p
        }
    };
    m.input(&path)?;
    let ckpt = Checkpoint::load(&path)?;
    match Trainer::from_checkpoint(&ckpt) {
        Ok(t) => Ok(t.best_model()),
        Err(_) => Captioner::from_checkpoint(&ckpt),
    }
}

fn decode_all(cfg: &RunConfig, model: &Captioner, visuals: &[Visual]) -> Result<Vec<Decoded>> {
    if cfg.decode.beam == 1 {
        return generate_greedy(model, visuals, DECODE_BATCH);
    }
    let mut out = Vec::with_capacity(visuals.len());
    for chunk in visuals.chunks(DECODE_BATCH) {
        let refs: Vec<&Visual> = chunk.iter().collect();
        let scorer = ModelScorer::new(model, &refs)?;
        for i in 0..refs.len() {
            out.push(beam_decode(&scorer, i, cfg.decode.beam, cfg.decode.length_penalty)?);
        }
    }
    Ok(out)
}

fn check_vocab(model: &Captioner, vocab: &Vocabulary) -> Result<()> {
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Data("checkpoint and vocabulary sizes differ".into()));
    }
    Ok(())
}

fn captions_tsv(captions: &[String]) -> String {
    let mut s = String::new();
    for (i, c) in captions.iter().enumerate() {
        writeln!(s, "{i}\t{c}").expect("writing to a string");
    }
    s
}

pub fn eval(cfg: &RunConfig) -> Result<Manifest> {
    let mut m = Manifest::new("eval", cfg)?;
    let paths = Paths(cfg);
    let vocab = load_vocab(cfg, &mut m)?;
    let model = load_model(cfg, &mut m)?;
    check_vocab(&model, &vocab)?;
    let ds = load_split(cfg, false, &mut m)?;
    let visuals: Vec<Visual> = ds.features.into_iter().map(Visual::Grid).collect();
    let decoded = decode_all(cfg, &model, &visuals)?;
    let cands: Vec<String> = decoded.iter().map(|d| caption_words(&vocab, &d.tokens).join(" ")).collect();
    let report = evaluate_text(&cands, &ds.captions)?;
    eprintln!(
        "CIDEr-D {:.4}  BLEU-1..4 {:?}",
        report.cider_d,
        report.bleu.iter().map(|b| (b * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
    let p = paths.out("eval.json");
    write(&p, serde_json::to_string_pretty(&report)? + "\n")?;
    m.output(&p)?;
    let c = paths.out("eval_captions.tsv");
    write(&c, captions_tsv(&cands))?;
    m.output(&c)?;
    Ok(m)
}

#[derive(Serialize)]
struct WordAttention {
    word: String,
    /// Head-averaged cross-attention, `h` rows of `w` cells (one row of all
    /// cells when the features have no layout).
    grid: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct ImageAttention {
    image: usize,
    caption: String,
    words: Vec<WordAttention>,
}

pub fn generate(cfg: &RunConfig, attention_dump: bool) -> Result<Manifest> {
    let mut m = Manifest::new("generate", cfg)?;
    let paths = Paths(cfg);
    let vocab = load_vocab(cfg, &mut m)?;
    let model = load_model(cfg, &mut m)?;
    check_vocab(&model, &vocab)?;
    let ds = load_split(cfg, false, &mut m)?;
    let visuals: Vec<Visual> = ds.features.into_iter().map(Visual::Grid).collect();
    let decoded = decode_all(cfg, &model, &visuals)?;
    let cands: Vec<String> = decoded.iter().map(|d| caption_words(&vocab, &d.tokens).join(" ")).collect();
    let p = paths.out("captions.tsv");
    write(&p, captions_tsv(&cands))?;
    m.output(&p)?;

    if attention_dump {
        let mut dump = Vec::with_capacity(visuals.len());
        for (i, (v, d)) in visuals.iter().zip(&decoded).enumerate() {
            let maps = attention_maps(&model, v, &d.tokens)?;
            let words = d
                .tokens
                .iter()
                .zip(maps)
                .map(|(&tok, row)| WordAttention {
                    word: vocab.token(tok).unwrap_or("?").to_string(),
                    grid: match v.layout() {
                        Some((_, w)) => row.chunks(w).map(<[f64]>::to_vec).collect(),
                        None => vec![row],
                    },
                })
                .collect();
            dump.push(ImageAttention {
                image: i,
                caption: cands[i].clone(),
                words,
            });
        }
        let a = paths.out("attention.json");
        write(&a, serde_json::to_string(&dump)? + "\n")?;
        m.output(&a)?;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TreeFormat {
    Json,
    Dot,
    Text,
}

/// Renders the tree; `text` lists every prototype with its member concepts.
pub fn inspect_tree(cfg: &RunConfig, format: TreeFormat, output: Option<&Path>) -> Result<Manifest> {
    let mut m = Manifest::new("inspect-tree", cfg)?;
    let tree = load_tree(cfg, &mut m)?;
    let rendered = match format {
        TreeFormat::Json => serde_json::to_string_pretty(&tree)? + "\n",
        TreeFormat::Dot => tree.to_dot()?,
        TreeFormat::Text => {
            let mut s = String::new();
            for (l, lv) in tree.levels.iter().enumerate().rev() {
                writeln!(s, "L{} ({} prototypes)", l + 1, lv.size).expect("writing to a string");
                for i in 0..lv.size {
                    let members: Vec<&str> = (0..tree.concepts.len())
                        .filter(|&c| tree.ancestor(c, l) == i)
                        .map(|c| tree.concepts[c].as_str())
                        .collect();
                    let parent = tree
                        .levels
                        .get(l + 1)
                        .map_or(String::new(), |up| format!(" <- L{}:{}", l + 2, up.parent_of[i]));
                    writeln!(s, "  L{}:{i}{parent} [{}] {}", l + 1, members.len(), members.join(" "))
                        .expect("writing to a string");
                }
            }
            s
        }
    };
    match output {
        Some(p) => {
            write(p, &rendered)?;
            m.output(p)?;
        }
        None => print!("{rendered}"),
    }
    Ok(m)
}
