use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::prototype_tree::PrototypeTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeMode {
    /// Prototypes start from the tree centroids and are fine-tuned.
    Trainable,
    Frozen,
}

/// One entry of a block schedule: a prototype count ("800") or a tree level
/// ("L2", 1-based with L1 the finest).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LevelRef {
    Count(usize),
    Level(usize),
}

/// Tree level used by each cross-modal attention block, in application
/// order. Written like `800-800-2000` or `L2-L1`; `none` or an empty string
/// is the empty schedule.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockSchedule(pub Vec<LevelRef>);

impl BlockSchedule {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Resolves every block to a 0-based tree level (0 = finest) and checks
    /// that prototype counts never decrease along the schedule.
    pub fn resolve(&self, tree: &PrototypeTree) -> Result<Vec<usize>> {
        let sizes = tree.level_sizes();
        let levels = self
            .0
            .iter()
            .map(|r| match *r {
                LevelRef::Count(c) => sizes.iter().position(|&s| s == c).ok_or_else(|| {
                    Error::config(format!("schedule asks for {c} prototypes but tree levels are {sizes:?}"))
                }),
                LevelRef::Level(l) if (1..=sizes.len()).contains(&l) => Ok(l - 1),
                LevelRef::Level(l) => Err(Error::config(format!(
                    "schedule level L{l} does not exist in a {}-level tree",
                    sizes.len()
                ))),
            })
            .collect::<Result<Vec<usize>>>()?;
        if levels.windows(2).any(|w| sizes[w[1]] < sizes[w[0]]) {
            return Err(Error::config(format!(
                "schedule `{self}` goes from fine to coarse; prototype counts must not decrease"
            )));
        }
        Ok(levels)
    }
}

impl FromStr for BlockSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(BlockSchedule(Vec::new()));
        }
        s.split(['-', ','])
            .map(|part| {
                let p = part.trim();
                let bad = || Error::config(format!("bad schedule entry `{p}` in `{s}`"));
                let r = if let Some(l) = p.strip_prefix(['L', 'l']) {
                    LevelRef::Level(l.parse().map_err(|_| bad())?)
                } else {
                    LevelRef::Count(p.parse().map_err(|_| bad())?)
                };
                match r {
                    LevelRef::Count(0) | LevelRef::Level(0) => Err(bad()),
                    r => Ok(r),
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(BlockSchedule)
    }
}

impl fmt::Display for BlockSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|r| match r {
                LevelRef::Count(c) => c.to_string(),
                LevelRef::Level(l) => format!("L{l}"),
            })
            .collect();
        f.write_str(&parts.join("-"))
    }
}

impl Serialize for BlockSchedule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BlockSchedule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Patch-embedding transformer used when the model consumes raw images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyEncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub blocks: usize,
}

impl ToyEncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn n_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0
            || self.image_height == 0
            || self.image_width == 0
            || self.image_height % self.patch != 0
            || self.image_width % self.patch != 0
        {
            return Err(Error::config(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    /// Longest decoder input (`<bos>` plus words); also the most tokens a
    /// decode emits.
    pub max_len: usize,
    pub schedule: BlockSchedule,
    pub prototype_mode: PrototypeMode,
    /// Residual dropout rate, applied only by training losses.
    pub dropout: f64,
    /// Raw-image front end; `None` means grid features are supplied directly.
    pub encoder: Option<ToyEncoderConfig>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            decoder_layers: 3,
            vocab_size: 0,
            max_len: 20,
            schedule: "800-800-2000".parse().expect("valid"),
            prototype_mode: PrototypeMode::Trainable,
            dropout: 0.0,
            encoder: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("decoder_layers", self.decoder_layers),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be at least 1")));
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::config("model.vocab_size must cover the 3 specials and a word"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "model.d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout must be in [0, 1)"));
        }
        if let Some(e) = &self.encoder {
            e.validate()?;
        }
        Ok(())
    }
}
