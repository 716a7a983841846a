//! Prototype matrix initialization from per-category clusters of global
//! image/report features.

mod kmeans;
mod matrix;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use kmeans::{kmeans, sq_dist, wcss, KMeansResult, DEFAULT_MAX_ITER, DEFAULT_TOL};
pub use matrix::{PrototypeMatrix, Provenance, PM_MAGIC};

use crate::corpus::{Sample, Vocabulary};
use crate::error::{Error, Result};

/// Standard deviation of fallback prototypes and of the jitter added to
/// recycled members.
pub const FALLBACK_STD: f64 = 0.01;
/// Standard deviation of a randomly initialized matrix.
pub const RANDOM_PM_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFeatures {
    pub o_i: Vec<f64>,
    pub o_if: Vec<f64>,
    pub o_t: Vec<f64>,
}

/// Fixed random projections standing in for pretrained image and text encoders.
///
/// The visual map reads the whole flattened grid, so the mirrored image
/// generally projects to a different vector. The textual map reads
/// bag-of-words counts.
#[derive(Debug, Clone)]
pub struct GlobalExtractor {
    grid: (usize, usize, usize),
    vocab_size: usize,
    visual: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
}

impl GlobalExtractor {
    pub fn new(
        grid: (usize, usize, usize),
        vocab_size: usize,
        c1: usize,
        c2: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = grid.0 * grid.1 * grid.2;
        let mut draw = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
            let normal = Normal::new(0.0, 1.0 / (cols.max(1) as f64).sqrt()).expect("finite");
            (0..rows)
                .map(|_| (0..cols).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        };
        let visual = draw(c1, input);
        let text = draw(c2, vocab_size);
        Self {
            grid,
            vocab_size,
            visual,
            text,
        }
    }

    pub fn dim(&self) -> usize {
        self.visual.len() + self.text.len()
    }

    /// `rows · x`, scaled to unit length (a zero projection stays zero).
    fn project(rows: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
        out
    }

    pub fn extract(&self, sample: &Sample) -> Result<GlobalFeatures> {
        let img = &sample.image;
        if (img.height(), img.width(), img.channels()) != self.grid {
            return Err(Error::data(format!(
                "sample {} has a {}x{}x{} grid, extractor expects {:?}",
                sample.id,
                img.height(),
                img.width(),
                img.channels(),
                self.grid
            )));
        }
        let mut bow = vec![0.0; self.vocab_size];
        for &t in &sample.report {
            if Vocabulary::is_special(t) {
                continue;
            }
            *bow.get_mut(t).ok_or(Error::Vocab {
                id: t,
                size: self.vocab_size,
            })? += 1.0;
        }
        Ok(GlobalFeatures {
            o_i: Self::project(&self.visual, img.data()),
            o_if: Self::project(&self.visual, img.flip_horizontal().data()),
            o_t: Self::project(&self.text, &bow),
        })
    }
}

pub fn extract_global_features(
    sample: &Sample,
    extractor: &GlobalExtractor,
) -> Result<GlobalFeatures> {
    extractor.extract(sample)
}

/// Per-category multisets `R_k` of concatenated visual/textual features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureSets {
    pub sets: Vec<Vec<Vec<f64>>>,
}

impl ClassFeatureSets {
    pub fn num_categories(&self) -> usize {
        self.sets.len()
    }
}

/// Inserts `[o_i; o_t]` and `[o_if; o_t]` into `R_k` for every active `k`.
pub fn build_class_feature_sets(
    samples: &[Sample],
    num_categories: usize,
    extractor: &GlobalExtractor,
) -> Result<ClassFeatureSets> {
    let mut sets = vec![Vec::new(); num_categories];
    for s in samples {
        if s.labels.len() != num_categories {
            return Err(Error::data(format!(
                "sample {} has {} labels, expected {num_categories}",
                s.id,
                s.labels.len()
            )));
        }
        if s.labels.is_all_zero() {
            continue;
        }
        let f = extractor.extract(s)?;
        let plain: Vec<f64> = f.o_i.iter().chain(&f.o_t).copied().collect();
        let flipped: Vec<f64> = f.o_if.iter().chain(&f.o_t).copied().collect();
        for k in s.labels.active() {
            sets[k].push(plain.clone());
            sets[k].push(flipped.clone());
        }
    }
    Ok(ClassFeatureSets { sets })
}

/// A freshly initialized matrix with the clustering behind each category.
#[derive(Debug, Clone)]
pub struct PrototypeInit {
    pub matrix: PrototypeMatrix,
    /// Member-to-cluster assignment per category, `None` where a fallback was used.
    pub clusterings: Vec<Option<KMeansResult>>,
}

fn category_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Cluster means of each `R_k` become `PM(k, ·)`.
///
/// Categories with no members get `N(0, FALLBACK_STD²)` rows; categories with
/// fewer members than `n_p` cycle through their members with the same jitter.
pub fn init_prototype_matrix(
    sets: &ClassFeatureSets,
    n_p: usize,
    dim: usize,
    seed: u64,
) -> Result<PrototypeInit> {
    if n_p == 0 {
        return Err(Error::config("prototypes_per_category must be at least 1"));
    }
    let n_l = sets.num_categories();
    let mut data = Vec::with_capacity(n_l * n_p * dim);
    let mut provenance = Vec::with_capacity(n_l * n_p);
    let mut clusterings = Vec::with_capacity(n_l);
    let jitter = Normal::new(0.0, FALLBACK_STD).expect("finite");

    for (k, members) in sets.sets.iter().enumerate() {
        if members.iter().any(|m| m.len() != dim) {
            return Err(Error::data(format!(
                "feature set {k} has vectors not of width {dim}"
            )));
        }
        let cseed = category_seed(seed, k);
        if members.len() >= n_p {
            let result = kmeans(members, n_p, cseed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
            for c in &result.centroids {
                data.extend_from_slice(c);
                provenance.push(Provenance::ClusterMean);
            }
            clusterings.push(Some(result));
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cseed);
        for i in 0..n_p {
            let base = members.get(i % members.len().max(1));
            for d in 0..dim {
                let b = base.map_or(0.0, |m| m[d]);
                data.push(b + jitter.sample(&mut rng));
            }
            provenance.push(Provenance::Fallback);
        }
        clusterings.push(None);
    }
    let matrix = PrototypeMatrix::new(n_l, n_p, dim, data, provenance)?;
    Ok(PrototypeInit {
        matrix,
        clusterings,
    })
}
