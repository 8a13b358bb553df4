//! Hierarchical clustering of concept embeddings into a prototype tree.

mod gmm;
mod kmeans;
mod tree;

use serde::{Deserialize, Serialize};

pub use gmm::{gmm_fit, GaussianMixture, VARIANCE_FLOOR};
pub use kmeans::{kmeans, Clustering};
pub use tree::{build_tree, PrototypeLevel, PrototypeTree, TreeMeta};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMethod {
    Kmeans,
    Gmm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub method: ClusterMethod,
    pub seed: u64,
    pub max_iters: usize,
    /// Relative improvement below which iteration stops.
    pub tol: f64,
    /// k-means restarts; the lowest-distortion run is kept.
    pub n_init: usize,
    /// Weight level-2+ points by the number of concepts beneath them.
    pub weighted: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            method: ClusterMethod::Kmeans,
            seed: 0,
            max_iters: 300,
            tol: 1e-10,
            n_init: 10,
            weighted: false,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("cluster max_iters must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("cluster tol must be positive"));
        }
        if self.n_init == 0 {
            return Err(Error::config("cluster n_init must be at least 1"));
        }
        Ok(())
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().map(|&c| pairs(c)).sum();
    let row: f64 = (0..ka).map(|i| pairs(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let col: f64 = (0..kb).map(|j| pairs((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = if total > 0.0 { row * col / total } else { 0.0 };
    let max = 0.5 * (row + col);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
