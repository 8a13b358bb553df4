use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::planted::{gen_planted_embeddings, PlantedTreeSpec};
use crate::error::{Error, Result};
use crate::lexicon::{words, ConceptList, EmbeddingMatrix, Vocabulary};
use crate::metrics::{cider_d, IdfTable};
use crate::model::GridFeatures;
use crate::numerics::Tensor;
use crate::training::CaptionDataset;

const GROUPS: [(&str, [&str; 6]); 4] = [
    ("animal", ["cat", "dog", "horse", "bird", "sheep", "cow"]),
    ("vehicle", ["car", "bus", "truck", "bike", "train", "boat"]),
    ("food", ["pizza", "cake", "apple", "banana", "sandwich", "donut"]),
    ("furniture", ["chair", "bench", "sofa", "table", "bed", "desk"]),
];

const FILLER: [&str; 9] = ["a", "and", "there", "is", "picture", "of", "in", "the", "scene"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyWorldConfig {
    pub n_groups: usize,
    pub concepts_per_group: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Feature width; must equal the model width.
    pub dim: usize,
    pub cells_per_concept: usize,
    /// Each sample shows 1 to `max_concepts` distinct concepts.
    pub max_concepts: usize,
    /// Each sample gets 1 to `max_captions` references.
    pub max_captions: usize,
    /// Noise norm as a fraction of the mean signature norm.
    pub noise: f64,
    /// One canonical caption per sample instead of random templates.
    pub deterministic: bool,
    /// Width of the concept word embeddings.
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        ToyWorldConfig {
            n_groups: 4,
            concepts_per_group: 4,
            grid_h: 4,
            grid_w: 4,
            dim: 64,
            cells_per_concept: 1,
            max_concepts: 3,
            max_captions: 5,
            noise: 0.1,
            deterministic: false,
            embedding_dim: 16,
            seed: 0,
        }
    }
}

impl ToyWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_groups", self.n_groups),
            ("concepts_per_group", self.concepts_per_group),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("dim", self.dim),
            ("cells_per_concept", self.cells_per_concept),
            ("max_concepts", self.max_concepts),
            ("max_captions", self.max_captions),
            ("embedding_dim", self.embedding_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("toy.{name} must be at least 1")));
            }
        }
        let n = self.n_groups * self.concepts_per_group;
        if self.max_concepts > n {
            return Err(Error::config("toy.max_concepts exceeds the number of concepts"));
        }
        if n * self.cells_per_concept > self.grid_h * self.grid_w {
            return Err(Error::config(format!(
                "{n} concepts x {} cells do not fit disjointly in a {}x{} grid",
                self.cells_per_concept, self.grid_h, self.grid_w
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("toy.noise must be non-negative"));
        }
        Ok(())
    }
}

/// One rendered sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    /// Concept indices, ascending.
    pub concepts: Vec<usize>,
    pub features: GridFeatures,
    pub captions: Vec<String>,
}

/// Concepts in a two-level hierarchy (group, concept), each with a feature
/// signature written into its own grid cells, and a template grammar.
#[derive(Clone, Debug)]
pub struct ToyWorld {
    config: ToyWorldConfig,
    concepts: Vec<String>,
    groups: Vec<String>,
    embeddings: Tensor,
    signatures: Tensor,
    /// Written into every cell no concept occupies.
    background: Vec<f64>,
    cells: Vec<Vec<usize>>,
    noise_std: f64,
}

impl ToyWorld {
    pub fn new(config: ToyWorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (mut concepts, mut groups) = (Vec::new(), Vec::new());
        for g in 0..config.n_groups {
            groups.push(GROUPS.get(g).map_or(format!("group{g}"), |(n, _)| n.to_string()));
            for c in 0..config.concepts_per_group {
                let name = match GROUPS.get(g) {
                    Some((_, names)) if c < names.len() => names[c].to_string(),
                    _ => format!("g{g}c{c}"),
                };
                concepts.push(name);
            }
        }

        // Signature = a fixed random linear image of the concept's word
        // embedding, so visual and semantic clusters agree.
        let d = config.dim;
        let e = config.embedding_dim;
        let embeddings = gen_planted_embeddings(&PlantedTreeSpec {
            n_super: config.n_groups,
            n_sub_per_super: config.concepts_per_group,
            concepts_per_sub: 1,
            dim: e,
            separation: 4.0,
            seed: config.seed ^ 0x5eed,
        })?
        .embeddings
        .matrix()
        .clone();
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let map = Tensor::randn(&[e, d], 1.0 / (e as f64).sqrt(), &mut rng);
        let signatures = embeddings.matmul(&map)?;
        let background: Vec<f64> = (0..d).map(|_| unit.sample(&mut rng) * std::f64::consts::SQRT_2).collect();
        let mean_norm = (0..concepts.len())
            .map(|i| signatures.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / concepts.len() as f64;

        let mut order: Vec<usize> = (0..config.grid_h * config.grid_w).collect();
        order.shuffle(&mut rng);
        let cells = order
            .chunks(config.cells_per_concept)
            .take(concepts.len())
            .map(|c| {
                let mut c = c.to_vec();
                c.sort_unstable();
                c
            })
            .collect();
        Ok(ToyWorld {
            noise_std: config.noise * mean_norm / (d as f64).sqrt(),
            config,
            concepts,
            groups,
            embeddings,
            signatures,
            background,
            cells,
        })
    }

    pub fn config(&self) -> &ToyWorldConfig {
        &self.config
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn group_of(&self, concept: usize) -> usize {
        concept / self.config.concepts_per_group
    }

    /// Grid cells (row-major indices) carrying a concept's signature.
    pub fn cells(&self, concept: usize) -> &[usize] {
        &self.cells[concept]
    }

    pub fn n_cells(&self) -> usize {
        self.config.grid_h * self.config.grid_w
    }

    /// Every word the grammar can produce.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut all: Vec<&str> = FILLER.to_vec();
        all.extend(self.concepts.iter().map(String::as_str));
        all.extend(self.groups.iter().map(String::as_str));
        Vocabulary::from_words(&all)
    }

    /// Concept word embeddings clustered by group, for building the
    /// prototype tree.
    pub fn concept_embeddings(&self) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(
            ConceptList::from_unchecked(self.concepts.clone()),
            self.embeddings.clone(),
        )
    }

    /// Grid features of a concept set; `rng` supplies the noise.
    pub fn render(&self, concepts: &[usize], rng: &mut impl Rng) -> Result<GridFeatures> {
        let d = self.config.dim;
        let mut data = Vec::with_capacity(self.n_cells() * d);
        for _ in 0..self.n_cells() {
            data.extend_from_slice(&self.background);
        }
        for &c in concepts {
            for &cell in &self.cells[c] {
                data[cell * d..(cell + 1) * d].copy_from_slice(self.signatures.row(c));
            }
        }
        if self.noise_std > 0.0 {
            let noise = Normal::new(0.0, self.noise_std).expect("valid normal");
            for v in &mut data {
                *v += noise.sample(rng);
            }
        }
        GridFeatures::new(
            Tensor::new(vec![self.n_cells(), d], data)?,
            Some((self.config.grid_h, self.config.grid_w)),
        )
    }

    fn list(names: &[&str]) -> String {
        let items: Vec<String> = names.iter().map(|n| format!("a {n}")).collect();
        match items.len() {
            1 => items[0].clone(),
            n => format!("{} and {}", items[..n - 1].join(" "), items[n - 1]),
        }
    }

    /// The caption of the deterministic task: concepts in index order.
    pub fn canonical_caption(&self, concepts: &[usize]) -> String {
        let names: Vec<&str> = concepts.iter().map(|&c| self.concepts[c].as_str()).collect();
        Self::list(&names)
    }

    /// Every caption the grammar can emit for a concept set, canonical
    /// caption first.
    pub fn candidate_captions(&self, concepts: &[usize]) -> Vec<String> {
        let mut out = Vec::new();
        for perm in permutations(concepts) {
            let names: Vec<&str> = perm.iter().map(|&c| self.concepts[c].as_str()).collect();
            let groups: Vec<&str> = perm.iter().map(|&c| self.groups[self.group_of(c)].as_str()).collect();
            let l = Self::list(&names);
            for c in [
                l.clone(),
                format!("there is {l}"),
                format!("a picture of {l}"),
                format!("{l} in the scene"),
                Self::list(&groups),
            ] {
                if !out.contains(&c) {
                    out.push(c);
                }
            }
        }
        out
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<ToySample> {
        let n_concepts = self.concepts.len();
        let k = rng.random_range(1..=self.config.max_concepts);
        let mut concepts = index::sample(rng, n_concepts, k).into_vec();
        concepts.sort_unstable();
        let features = self.render(&concepts, rng)?;
        let captions = if self.config.deterministic {
            vec![self.canonical_caption(&concepts)]
        } else {
            let cands = self.candidate_captions(&concepts);
            let m = rng.random_range(1..=self.config.max_captions).min(cands.len());
            index::sample(rng, cands.len(), m).into_iter().map(|i| cands[i].clone()).collect()
        };
        Ok(ToySample {
            concepts,
            features,
            captions,
        })
    }

    /// `n` samples of a split. Sample `i` of split `s` draws from its own
    /// ChaCha stream `(s << 32) | i`, so splits never share randomness.
    pub fn samples(&self, split: u32, n: usize) -> Result<Vec<ToySample>> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream((u64::from(split) << 32) | i as u64);
                self.sample(&mut rng)
            })
            .collect()
    }

    /// Candidate caption with the highest CIDEr-D against the sample's
    /// references: the best any model can do on that sample.
    pub fn oracle_caption(&self, sample: &ToySample, idf: &IdfTable<String>) -> Result<String> {
        let refs: Vec<Vec<String>> = sample.captions.iter().map(|c| words(c)).collect();
        let mut best = (f64::NEG_INFINITY, String::new());
        for c in self.candidate_captions(&sample.concepts) {
            let s = cider_d(&words(&c), &refs, idf)?;
            if s > best.0 {
                best = (s, c);
            }
        }
        Ok(best.1)
    }
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Train and validation splits of a toy world.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub train: Vec<ToySample>,
    pub val: Vec<ToySample>,
}

impl ToyDataset {
    pub fn split(samples: &[ToySample]) -> CaptionDataset {
        CaptionDataset {
            features: samples.iter().map(|s| s.features.clone()).collect(),
            captions: samples.iter().map(|s| s.captions.clone()).collect(),
        }
    }
}

pub fn gen_toy_dataset(world: &ToyWorld, n_train: usize, n_val: usize) -> Result<ToyDataset> {
    Ok(ToyDataset {
        train: world.samples(0, n_train)?,
        val: world.samples(1, n_val)?,
    })
}
