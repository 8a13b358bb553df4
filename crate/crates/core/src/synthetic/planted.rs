use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{ConceptList, EmbeddingMatrix};
use crate::numerics::Tensor;

/// Three-level Gaussian hierarchy: super centres, sub centres around them,
/// concepts around the sub centres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedTreeSpec {
    pub n_super: usize,
    pub n_sub_per_super: usize,
    pub concepts_per_sub: usize,
    pub dim: usize,
    /// Per-coordinate spread of cluster centres divided by the spread of the
    /// members around them, at both levels. Concepts have unit spread.
    pub separation: f64,
    pub seed: u64,
}

impl PlantedTreeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_super == 0 || self.n_sub_per_super == 0 || self.concepts_per_sub == 0 || self.dim == 0 {
            return Err(Error::config("planted tree counts must be at least 1"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::config("planted tree separation must be positive"));
        }
        Ok(())
    }

    pub fn n_sub(&self) -> usize {
        self.n_super * self.n_sub_per_super
    }

    pub fn n_concepts(&self) -> usize {
        self.n_sub() * self.concepts_per_sub
    }
}

/// Generated embeddings with their ground-truth labels.
#[derive(Clone, Debug)]
pub struct PlantedEmbeddings {
    pub embeddings: EmbeddingMatrix,
    pub sub_labels: Vec<usize>,
    pub super_labels: Vec<usize>,
    pub sub_centers: Tensor,
    pub super_centers: Tensor,
}

/// Concept `i` is named `c{i}`; rows are grouped by sub cluster, sub
/// clusters by super cluster.
pub fn gen_planted_embeddings(spec: &PlantedTreeSpec) -> Result<PlantedEmbeddings> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let d = spec.dim;
    let s_sub = spec.separation;
    let s_super = spec.separation * s_sub;

    let mut super_centers = Vec::with_capacity(spec.n_super * d);
    for _ in 0..spec.n_super * d {
        super_centers.push(s_super * unit.sample(&mut rng));
    }
    let mut sub_centers = Vec::with_capacity(spec.n_sub() * d);
    let mut rows = Vec::with_capacity(spec.n_concepts() * d);
    let (mut sub_labels, mut super_labels) = (Vec::new(), Vec::new());
    for s in 0..spec.n_super {
        for j in 0..spec.n_sub_per_super {
            let sub = s * spec.n_sub_per_super + j;
            let center: Vec<f64> = (0..d)
                .map(|k| super_centers[s * d + k] + s_sub * unit.sample(&mut rng))
                .collect();
            for _ in 0..spec.concepts_per_sub {
                rows.extend(center.iter().map(|c| c + unit.sample(&mut rng)));
                sub_labels.push(sub);
                super_labels.push(s);
            }
            sub_centers.extend(center);
        }
    }
    let names = (0..spec.n_concepts()).map(|i| format!("c{i}")).collect();
    let embeddings = EmbeddingMatrix::new(
        ConceptList::from_unchecked(names),
        Tensor::new(vec![spec.n_concepts(), d], rows)?,
    )?;
    Ok(PlantedEmbeddings {
        embeddings,
        sub_labels,
        super_labels,
        sub_centers: Tensor::new(vec![spec.n_sub(), d], sub_centers)?,
        super_centers: Tensor::new(vec![spec.n_super, d], super_centers)?,
    })
}
