//! Synthetic image/report corpus, vocabulary, rule-based labeler and dataset files.

mod dataset;
mod image;
mod labels;
mod spec;
mod vocab;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use dataset::{load_dataset, save_dataset, DatasetRecord};
pub use image::{flip_image, PatchGrid};
pub use labels::LabelVector;
pub use spec::{CategorySpec, CorpusSpec, PatchSignature};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, PAD, UNK};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: PatchGrid,
    /// Token ids, `BOS … EOS`.
    pub report: Vec<TokenId>,
    pub labels: LabelVector,
}

/// Every word of every template, in category order.
pub fn build_vocabulary(spec: &CorpusSpec) -> Vocabulary {
    Vocabulary::from_words(spec.categories.iter().flat_map(|c| {
        c.normal
            .split_whitespace()
            .chain(c.finding.split_whitespace())
    }))
}

/// Maps a report to its category vector by keyword lookup.
#[derive(Debug, Clone)]
pub struct Labeler {
    keywords: Vec<Option<TokenId>>,
}

impl Labeler {
    pub fn new(spec: &CorpusSpec, vocab: &Vocabulary) -> Self {
        Self {
            keywords: spec
                .categories
                .iter()
                .map(|c| vocab.id(&c.keyword))
                .collect(),
        }
    }

    pub fn num_categories(&self) -> usize {
        self.keywords.len()
    }

    /// `y_k = 1` iff category `k`'s keyword occurs in `report`.
    pub fn label_report(&self, report: &[TokenId]) -> LabelVector {
        let mut y = LabelVector::zeros(self.keywords.len());
        for (k, kw) in self.keywords.iter().enumerate() {
            if let Some(kw) = kw {
                y.set(k, report.contains(kw));
            }
        }
        y
    }
}

/// Draws `spec.num_samples` samples; a pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let vocab = build_vocabulary(spec);
    let n_cat = spec.num_categories();
    let sentences: Vec<(Vec<TokenId>, Vec<TokenId>)> = spec
        .categories
        .iter()
        .map(|c| (vocab.encode(&c.normal), vocab.encode(&c.finding)))
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut samples = Vec::with_capacity(spec.num_samples);
    for u in 0..spec.num_samples {
        let active: Vec<usize> = if rng.random_bool(spec.normal_probability) {
            Vec::new()
        } else {
            let count = rng.random_range(1..=spec.max_active);
            let mut picked = rand::seq::index::sample(&mut rng, n_cat, count).into_vec();
            picked.sort_unstable();
            picked
        };
        let labels = LabelVector::from_active(n_cat, &active);

        let mut image = PatchGrid::zeros(spec.grid_height, spec.grid_width, spec.channels);
        for &k in &active {
            let sig = &spec.categories[k].signature;
            for &(r, c) in &sig.cells {
                for (x, p) in image.cell_mut(r, c).iter_mut().zip(&sig.pattern) {
                    *x += p;
                }
            }
        }
        if spec.noise_std > 0.0 {
            for r in 0..spec.grid_height {
                for c in 0..spec.grid_width {
                    for x in image.cell_mut(r, c) {
                        *x += noise.sample(&mut rng);
                    }
                }
            }
        }

        let mut report = vec![BOS];
        for (k, (normal, finding)) in sentences.iter().enumerate() {
            report.extend(if labels.get(k) { finding } else { normal });
        }
        report.push(EOS);

        samples.push(Sample {
            id: format!("s{u:05}"),
            image,
            report,
            labels,
        });
    }
    Ok(samples)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Seeded shuffle followed by a 70/10/20 train/val/test cut.
pub fn split_corpus(mut samples: Vec<Sample>, seed: u64) -> Splits {
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = samples.len();
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Splits {
        train: samples,
        val,
        test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n: usize) -> CorpusSpec {
        CorpusSpec {
            num_samples: n,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn all_normal_spec_gives_zero_labels() {
        let spec = CorpusSpec {
            normal_probability: 1.0,
            ..small_spec(50)
        };
        let vocab = build_vocabulary(&spec);
        let normal_text: Vec<&str> = spec.categories.iter().map(|c| c.normal.as_str()).collect();
        for s in generate_corpus(&spec).unwrap() {
            assert!(s.labels.is_all_zero());
            assert_eq!(vocab.decode(&s.report), normal_text.join(" "));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = small_spec(40);
        assert_eq!(
            generate_corpus(&spec).unwrap(),
            generate_corpus(&spec).unwrap()
        );
        let other = CorpusSpec {
            seed: 8,
            ..spec.clone()
        };
        assert_ne!(
            generate_corpus(&spec).unwrap(),
            generate_corpus(&other).unwrap()
        );
    }

    #[test]
    fn reports_are_framed_and_bounded() {
        let spec = small_spec(100);
        for s in generate_corpus(&spec).unwrap() {
            assert_eq!(s.report.first(), Some(&BOS));
            assert_eq!(s.report.last(), Some(&EOS));
            assert!(s.report.len() <= spec.max_report_len());
            assert!(s.labels.popcount() <= spec.max_active);
        }
    }

    #[test]
    fn labeler_sets_exact_bits() {
        let spec = CorpusSpec::default();
        let vocab = build_vocabulary(&spec);
        let labeler = Labeler::new(&spec, &vocab);
        assert!(labeler.label_report(&[BOS, EOS]).is_all_zero());
        let kw = |k: usize| vocab.id(&spec.categories[k].keyword).unwrap();
        let y = labeler.label_report(&[BOS, kw(2), UNK, 999, kw(5), EOS]);
        assert_eq!(y.active().collect::<Vec<_>>(), vec![2, 5]);
    }

    #[test]
    fn split_sizes() {
        let s = split_corpus(generate_corpus(&small_spec(1000)).unwrap(), 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (700, 100, 200));
        let s = split_corpus(generate_corpus(&small_spec(7)).unwrap(), 1);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 7);
    }
}
