use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lexicon::Vocabulary;
use crate::model::{load_grid_features, save_grid_features, GridFeatures};

/// Grid features with their reference captions. Image `i` is record `i` of
/// the grid file; the captions sidecar has `image_index<TAB>caption` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionDataset {
    pub features: Vec<GridFeatures>,
    pub captions: Vec<Vec<String>>,
}

impl CaptionDataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn load(grid_path: &Path, captions_path: &Path) -> Result<Self> {
        let features = load_grid_features(grid_path)?;
        let captions = read_captions(captions_path, features.len())?;
        Ok(CaptionDataset { features, captions })
    }

    pub fn save(&self, grid_path: &Path, captions_path: &Path) -> Result<()> {
        save_grid_features(grid_path, &self.features)?;
        let mut out = String::new();
        for (i, caps) in self.captions.iter().enumerate() {
            for c in caps {
                if c.contains(['\t', '\n']) {
                    return Err(Error::data(format!("caption of image {i} contains a tab or newline")));
                }
                writeln!(out, "{i}\t{c}").expect("writing to a string");
            }
        }
        fs::write(captions_path, out).map_err(|e| Error::io(captions_path, e))
    }

    /// Fails naming the first image without references.
    pub fn require_references(&self) -> Result<()> {
        match self.captions.iter().position(Vec::is_empty) {
            Some(i) => Err(Error::data(format!("image {i} has no reference captions"))),
            None => Ok(()),
        }
    }

    /// Token ids of every caption (out-of-vocabulary words dropped).
    pub fn tokenized(&self, vocab: &Vocabulary) -> Vec<Vec<Vec<u32>>> {
        self.captions
            .iter()
            .map(|cs| cs.iter().map(|c| vocab.tokenize(c)).collect())
            .collect()
    }
}

/// Captions grouped by image index, in file order.
pub fn read_captions(path: &Path, n_images: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = vec![Vec::new(); n_images];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| parse("expected `image_index<TAB>caption`".into()))?;
        let id: usize = id.trim().parse().map_err(|_| parse(format!("bad image index `{id}`")))?;
        let slot = out
            .get_mut(id)
            .ok_or_else(|| parse(format!("image index {id} but only {n_images} images")))?;
        slot.push(caption.to_string());
    }
    Ok(out)
}
