//! Run configuration: a TOML file plus `--section.key value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use protocap::model::{BlockSchedule, ModelConfig, PrototypeMode};
use protocap::prototype_tree::{ClusterConfig, ClusterMethod};
use protocap::synthetic::ToyWorldConfig;
use protocap::training::{AdamConfig, RlConfig, XeConfig};
use protocap::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; clustering, initialisation, training and the synthetic
    /// world all derive from it.
    pub seed: u64,
    /// Every artifact is written here.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub tree: TreeConfig,
    pub model: ModelSection,
    pub xe: XeConfig,
    pub rl: RlConfig,
    pub adam: AdamConfig,
    pub decode: DecodeConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            vocab: VocabConfig::default(),
            tree: TreeConfig::default(),
            model: ModelSection::default(),
            xe: XeConfig::default(),
            rl: RlConfig::default(),
            adam: AdamConfig::default(),
            decode: DecodeConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Dataset files. Unset paths fall back to the `gen-synthetic` outputs in
/// `out_dir/synthetic`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_grid: Option<PathBuf>,
    pub train_captions: Option<PathBuf>,
    pub val_grid: Option<PathBuf>,
    pub val_captions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    /// Words must occur more than this many times in the training captions.
    pub min_count: u64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { min_count: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeConfig {
    /// Prototype counts, finest level first.
    pub level_sizes: Vec<usize>,
    /// Word embedding file (text or binary).
    pub embeddings: Option<PathBuf>,
    /// Concept words, one per line; unset uses the synthetic concept list.
    pub concepts: Option<PathBuf>,
    pub max_miss_rate: f64,
    pub method: ClusterMethod,
    pub max_iters: usize,
    pub tol: f64,
    pub n_init: usize,
    pub weighted: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        let c = ClusterConfig::default();
        TreeConfig {
            level_sizes: vec![2000, 800],
            embeddings: None,
            concepts: None,
            max_miss_rate: 0.05,
            method: c.method,
            max_iters: c.max_iters,
            tol: c.tol,
            n_init: c.n_init,
            weighted: c.weighted,
        }
    }
}

impl TreeConfig {
    pub fn cluster(&self, seed: u64) -> ClusterConfig {
        ClusterConfig {
            method: self.method,
            seed,
            max_iters: self.max_iters,
            tol: self.tol,
            n_init: self.n_init,
            weighted: self.weighted,
        }
    }
}

/// Model hyperparameters; the vocabulary size comes from the vocabulary
/// file and the initialisation seed from the root seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub decoder_layers: usize,
    pub max_len: usize,
    pub schedule: BlockSchedule,
    pub prototype_mode: PrototypeMode,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_model: m.d_model,
            heads: m.heads,
            d_ff: m.d_ff,
            decoder_layers: m.decoder_layers,
            max_len: m.max_len,
            schedule: m.schedule,
            prototype_mode: m.prototype_mode,
            dropout: m.dropout,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            decoder_layers: self.decoder_layers,
            vocab_size,
            max_len: self.max_len,
            schedule: self.schedule.clone(),
            prototype_mode: self.prototype_mode,
            dropout: self.dropout,
            encoder: None,
            init_seed: seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// 1 decodes greedily.
    pub beam: usize,
    pub length_penalty: f64,
    /// Checkpoint used by `eval` and `generate`: `rl`, `xe`, `auto` (RL when
    /// present) or a file path.
    pub checkpoint: String,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 3,
            length_penalty: 0.0,
            checkpoint: "auto".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_groups: usize,
    pub concepts_per_group: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub cells_per_concept: usize,
    pub max_concepts: usize,
    pub max_captions: usize,
    pub noise: f64,
    pub deterministic: bool,
    pub embedding_dim: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let w = ToyWorldConfig::default();
        SyntheticConfig {
            n_train: 1000,
            n_val: 100,
            n_groups: w.n_groups,
            concepts_per_group: w.concepts_per_group,
            grid_h: w.grid_h,
            grid_w: w.grid_w,
            dim: w.dim,
            cells_per_concept: w.cells_per_concept,
            max_concepts: w.max_concepts,
            max_captions: w.max_captions,
            noise: w.noise,
            deterministic: w.deterministic,
            embedding_dim: w.embedding_dim,
        }
    }
}

impl SyntheticConfig {
    pub fn world(&self, seed: u64) -> ToyWorldConfig {
        ToyWorldConfig {
            n_groups: self.n_groups,
            concepts_per_group: self.concepts_per_group,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            dim: self.dim,
            cells_per_concept: self.cells_per_concept,
            max_concepts: self.max_concepts,
            max_captions: self.max_captions,
            noise: self.noise,
            deterministic: self.deterministic,
            embedding_dim: self.embedding_dim,
            seed,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from the defaults) and applies `overrides`,
    /// given as `(dotted key, value)` pairs.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let keys = default_keys();
        for (key, raw) in overrides {
            let Some((_, default)) = keys.iter().find(|(k, _)| k == key) else {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            };
            set_key(&mut doc, key, parse_value(raw, default))?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.xe.validate()?;
        self.rl.validate()?;
        self.adam.validate()?;
        self.model.model_config(4, self.seed).validate()?;
        self.synthetic.world(self.seed).validate()?;
        if self.tree.level_sizes.is_empty() {
            return Err(Error::Config("tree.level_sizes must not be empty".into()));
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("decode.beam must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tree.max_miss_rate) {
            return Err(Error::Config("tree.max_miss_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Every configuration key, sorted, with its default. Unset optional keys
/// render as `unset`.
pub fn default_keys() -> Vec<(String, String)> {
    let v = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    flatten("", &v, &mut out);
    out
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        serde_json::Value::Null => out.push((prefix.to_string(), "unset".into())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Help text listing every key.
pub fn keys_help() -> String {
    let keys = default_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (override with --<key> <value>):\n");
    for (k, d) in keys {
        s.push_str(&format!("  {k:width$}  {d}\n"));
    }
    s
}

/// A TOML literal when `raw` parses as one, a comma list when the default
/// is an array, otherwise a plain string.
fn parse_value(raw: &str, default: &str) -> toml::Value {
    if let Ok(t) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    if default.starts_with('[') {
        let items = raw
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse_value(s.trim(), ""))
            .collect();
        return toml::Value::Array(items);
    }
    toml::Value::String(raw.to_string())
}

fn set_key(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is not a table in the config file")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, text).unwrap();
        assert_eq!(RunConfig::load(Some(&p), &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_parse_by_type() {
        let c = RunConfig::load(
            None,
            &ov(&[
                ("xe.epochs", "3"),
                ("tree.level_sizes", "16,4"),
                ("model.schedule", "L2-L1"),
                ("adam.clip_norm", "1.5"),
                ("out_dir", "/tmp/x"),
                ("synthetic.deterministic", "true"),
            ]),
        )
        .unwrap();
        assert_eq!(c.xe.epochs, 3);
        assert_eq!(c.tree.level_sizes, vec![16, 4]);
        assert_eq!(c.model.schedule.to_string(), "L2-L1");
        assert_eq!(c.adam.clip_norm, Some(1.5));
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
        assert!(c.synthetic.deterministic);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::load(None, &ov(&[("xe.epoch", "3")])), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[model]\nwidth = 3\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(RunConfig::load(None, &ov(&[("decode.beam", "0")])), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &ov(&[("xe.epochs", "many")])), Err(Error::Config(_))));
    }

    #[test]
    fn help_lists_every_key_with_its_default() {
        let help = keys_help();
        for (k, _) in default_keys() {
            assert!(help.contains(&k), "{k}");
        }
        assert!(help.contains("tree.level_sizes"));
        assert!(help.contains("[2000,800]"));
        assert!(help.contains("data.train_grid"));
        assert!(help.contains("unset"));
    }
}
