//! Corpus BLEU and ROUGE-L over token sequences.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, BOS, EOS, PAD};

/// Stand-in for a zero modified precision.
pub const ZERO_PRECISION: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-`n` over `(candidate, reference)` pairs.
///
/// Modified n-gram precisions are clipped by reference counts and pooled over
/// the corpus before the geometric mean; the brevity penalty uses total
/// candidate and reference lengths.
pub fn bleu<T: Hash + Eq>(pairs: &[(Vec<T>, Vec<T>)], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be in 1..=4, got {n}");
    let c: usize = pairs.iter().map(|(cand, _)| cand.len()).sum();
    let r: usize = pairs.iter().map(|(_, refr)| refr.len()).sum();
    if c == 0 {
        return 0.0;
    }
    let mut score = 1.0;
    for m in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (cand, refr) in pairs {
            let ref_counts = ngram_counts(refr, m);
            for (gram, count) in ngram_counts(cand, m) {
                matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                total += count;
            }
        }
        let p = if matched == 0 {
            ZERO_PRECISION
        } else {
            matched as f64 / total as f64
        };
        score *= p.powf(1.0 / n as f64);
    }
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    bp * score
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one pair, `(1+β²)PR / (R + β²P)`.
pub fn rouge_l_pair<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean pairwise ROUGE-L; pairs with an empty reference are skipped.
pub fn rouge_l<T: Eq>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (i, (cand, refr)) in pairs.iter().enumerate() {
        if refr.is_empty() {
            log::warn!("ROUGE-L: skipping pair {i} with empty reference");
            continue;
        }
        sum += rouge_l_pair(cand, refr);
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        sum / counted as f64
    }
}

/// Drops PAD/BOS/EOS before scoring.
pub fn strip_special(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens
        .iter()
        .copied()
        .filter(|&t| ![PAD, BOS, EOS].contains(&t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    /// Scores raw `(generated, reference)` token sequences.
    pub fn compute(pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Self {
        let stripped: Vec<_> = pairs
            .iter()
            .map(|(c, r)| (strip_special(c), strip_special(r)))
            .collect();
        Self {
            bleu_1: bleu(&stripped, 1),
            bleu_2: bleu(&stripped, 2),
            bleu_3: bleu(&stripped, 3),
            bleu_4: bleu(&stripped, 4),
            rouge_l: rouge_l(&stripped),
            n_samples: pairs.len(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}
