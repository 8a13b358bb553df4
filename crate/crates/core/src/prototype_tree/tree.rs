use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, sq_dist, Clustering};
use super::{gmm_fit, ClusterConfig, ClusterMethod};
use crate::error::{Error, Result};
use crate::lexicon::EmbeddingMatrix;
use crate::numerics::Tensor;

/// One level of prototypes. `parent_of` is empty for the finest level; for
/// level `l > 0` it maps every level `l - 1` prototype to a prototype here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeLevel {
    pub size: usize,
    pub centroids: Vec<Vec<f64>>,
    pub parent_of: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeMeta {
    pub method: ClusterMethod,
    pub seed: u64,
    pub level_sizes: Vec<usize>,
    #[serde(default)]
    pub weighted: bool,
}

/// Coarse-to-fine prototypes over a concept list. Level 0 is the finest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTree {
    pub levels: Vec<PrototypeLevel>,
    /// Level-0 prototype of every concept.
    pub concept_members: Vec<usize>,
    pub concepts: Vec<String>,
    pub meta: TreeMeta,
}

fn check_sizes(level_sizes: &[usize], n_concepts: usize) -> Result<()> {
    if level_sizes.is_empty() {
        return Err(Error::config("at least one tree level is required"));
    }
    if level_sizes.iter().any(|&s| s == 0) {
        return Err(Error::config("tree level sizes must be positive"));
    }
    if level_sizes.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config(format!(
            "tree level sizes must be strictly decreasing, got {level_sizes:?}"
        )));
    }
    if level_sizes[0] > n_concepts {
        return Err(Error::config(format!(
            "finest level has {} prototypes but there are only {n_concepts} concepts",
            level_sizes[0]
        )));
    }
    Ok(())
}

fn cluster(x: &Tensor, k: usize, w: Option<&[f64]>, cfg: &ClusterConfig) -> Result<Clustering> {
    match cfg.method {
        ClusterMethod::Kmeans => kmeans(x, k, w, cfg),
        ClusterMethod::Gmm => Ok(gmm_fit(x, k, w, cfg)?.0),
    }
}

/// Clusters the concept embeddings into `level_sizes[0]` prototypes, then
/// clusters each level's centroids into the next, recording parent links.
pub fn build_tree(emb: &EmbeddingMatrix, level_sizes: &[usize], cfg: &ClusterConfig) -> Result<PrototypeTree> {
    let x = emb.matrix();
    check_sizes(level_sizes, x.n_rows())?;
    cfg.validate()?;
    let first = cluster(x, level_sizes[0], None, cfg)?;
    let mut counts = vec![0.0; level_sizes[0]];
    first.assignments.iter().for_each(|&a| counts[a] += 1.0);
    let mut levels = vec![PrototypeLevel {
        size: level_sizes[0],
        centroids: rows(&first.centroids),
        parent_of: Vec::new(),
    }];
    let mut prev = first.centroids;
    for (l, &k) in level_sizes.iter().enumerate().skip(1) {
        let level_cfg = ClusterConfig {
            seed: cfg.seed.wrapping_add(l as u64),
            ..cfg.clone()
        };
        let w = cfg.weighted.then_some(counts.as_slice());
        let c = cluster(&prev, k, w, &level_cfg)?;
        let mut next_counts = vec![0.0; k];
        for (child, &a) in c.assignments.iter().enumerate() {
            next_counts[a] += counts[child];
        }
        counts = next_counts;
        levels.push(PrototypeLevel {
            size: k,
            centroids: rows(&c.centroids),
            parent_of: c.assignments,
        });
        prev = c.centroids;
    }
    let tree = PrototypeTree {
        levels,
        concept_members: first.assignments,
        concepts: emb.concepts().tokens().to_vec(),
        meta: TreeMeta {
            method: cfg.method,
            seed: cfg.seed,
            level_sizes: level_sizes.to_vec(),
            weighted: cfg.weighted,
        },
    };
    tree.validate()?;
    Ok(tree)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.n_rows()).map(|i| t.row(i).to_vec()).collect()
}

impl PrototypeTree {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.size).collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.levels[0].centroids.first().map_or(0, Vec::len)
    }

    /// Centroids of `level` as a `size x d` tensor.
    pub fn centroids(&self, level: usize) -> Result<Tensor> {
        let lv = self
            .levels
            .get(level)
            .ok_or(Error::OutOfRange { index: level, len: self.levels.len() })?;
        Tensor::from_rows(&lv.centroids)
    }

    /// Prototype at `level` that concept `concept` belongs to.
    pub fn ancestor(&self, concept: usize, level: usize) -> usize {
        let mut p = self.concept_members[concept];
        for lv in &self.levels[1..=level] {
            p = lv.parent_of[p];
        }
        p
    }

    /// Checks the structural invariants: strictly decreasing sizes, one
    /// parent per item, every prototype non-empty, consistent widths.
    pub fn validate(&self) -> Result<()> {
        let sizes = self.level_sizes();
        check_sizes(&sizes, self.concepts.len())?;
        if self.concept_members.len() != self.concepts.len() {
            return Err(Error::data("one level-0 membership per concept is required"));
        }
        let d = self.embedding_dim();
        let mut below = self.concepts.len();
        let mut links = &self.concept_members;
        for (l, lv) in self.levels.iter().enumerate() {
            if lv.centroids.len() != lv.size || lv.centroids.iter().any(|c| c.len() != d || d == 0) {
                return Err(Error::data(format!("level {l} centroids do not match its size")));
            }
            if l > 0 {
                links = &lv.parent_of;
                if links.len() != below {
                    return Err(Error::data(format!("level {l} needs {below} parent links")));
                }
            } else if !lv.parent_of.is_empty() {
                return Err(Error::data("the finest level has no parent links"));
            }
            let mut used = vec![false; lv.size];
            for &p in links {
                *used.get_mut(p).ok_or(Error::OutOfRange { index: p, len: lv.size })? = true;
            }
            if let Some(e) = used.iter().position(|u| !u) {
                return Err(Error::data(format!("prototype {e} of level {l} is empty")));
            }
            below = lv.size;
        }
        Ok(())
    }

    /// Up to `top_k` concepts under prototype `index` of `level`, nearest to
    /// its centroid first. `embeddings` holds one row per concept.
    pub fn nearest_concepts(&self, level: usize, index: usize, top_k: usize, embeddings: &Tensor) -> Result<Vec<String>> {
        let lv = self
            .levels
            .get(level)
            .ok_or(Error::OutOfRange { index: level, len: self.levels.len() })?;
        if index >= lv.size {
            return Err(Error::OutOfRange { index, len: lv.size });
        }
        if embeddings.n_rows() != self.concepts.len() || embeddings.last_dim() != self.embedding_dim() {
            return Err(Error::shape("embedding matrix does not match the tree"));
        }
        let centroid = &lv.centroids[index];
        let mut members: Vec<(f64, usize)> = (0..self.concepts.len())
            .filter(|&c| self.ancestor(c, level) == index)
            .map(|c| (sq_dist(embeddings.row(c), centroid), c))
            .collect();
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(members.into_iter().take(top_k).map(|(_, c)| self.concepts[c].clone()).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: PrototypeTree = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Graphviz rendering: prototypes as boxes (coarsest at the top), concepts
    /// as leaves. Structure and labels only.
    pub fn to_dot(&self) -> Result<String> {
        self.validate()?;
        let mut s = String::from("digraph prototypes {\n  rankdir=TB;\n  node [shape=box];\n");
        for (l, lv) in self.levels.iter().enumerate().rev() {
            for i in 0..lv.size {
                let _ = writeln!(s, "  \"L{l}_{i}\" [label=\"L{l}:{i}\"];");
            }
            for (child, &p) in lv.parent_of.iter().enumerate() {
                let _ = writeln!(s, "  \"L{l}_{p}\" -> \"L{}_{child}\";", l - 1);
            }
        }
        for (c, (tok, &p)) in self.concepts.iter().zip(&self.concept_members).enumerate() {
            let label = tok.replace('\\', "\\\\").replace('"', "\\\"");
            let _ = writeln!(s, "  \"c{c}\" [label=\"{label}\", shape=plaintext];");
            let _ = writeln!(s, "  \"L0_{p}\" -> \"c{c}\";");
        }
        s.push_str("}\n");
        Ok(s)
    }
}
