use std::cmp::Ordering;
use std::collections::HashMap;

use crate::corpus::{TokenId, BOS, EOS};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// `BOS` followed by the generated words, ending in `EOS` unless cut at
    /// `max_len`.
    pub tokens: Vec<TokenId>,
    /// Sum of the log-probabilities of the generated words.
    pub log_prob: f64,
}

impl Hypothesis {
    fn start() -> Self {
        Self {
            tokens: vec![BOS],
            log_prob: 0.0,
        }
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[1..]
    }

    fn done(&self, max_len: usize) -> bool {
        self.tokens.last() == Some(&EOS) || self.tokens.len() >= max_len
    }

    fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.log_prob / self.generated().len().max(1) as f64
        } else {
            self.log_prob
        }
    }
}

fn ln(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(a: &Hypothesis, b: &Hypothesis, length_normalize: bool) -> Ordering {
    b.score(length_normalize)
        .total_cmp(&a.score(length_normalize))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Argmax decoding; `step` maps a prefix to the next-word distribution.
pub fn greedy<F>(mut step: F, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    let mut hyp = Hypothesis::start();
    while !hyp.done(max_len) {
        let probs = step(&hyp.tokens)?;
        let (tok, p) = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            });
        hyp.tokens.push(tok);
        hyp.log_prob += ln(p);
    }
    Ok(hyp)
}

/// Beam search over `step`, which is queried at most once per distinct prefix.
///
/// Finished hypotheses leave the beam; the search ends when no live
/// hypothesis remains. The greedy sequence is always among the final
/// candidates, so the result never scores below it.
pub fn beam_search<F>(
    mut step: F,
    beam: usize,
    max_len: usize,
    length_normalize: bool,
) -> Result<Hypothesis>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    let mut cache: HashMap<Vec<TokenId>, Vec<f64>> = HashMap::new();
    let mut cached = |prefix: &[TokenId]| -> Result<Vec<f64>> {
        if let Some(p) = cache.get(prefix) {
            return Ok(p.clone());
        }
        let p = step(prefix)?;
        cache.insert(prefix.to_vec(), p.clone());
        Ok(p)
    };
    let greedy_hyp = greedy(&mut cached, max_len)?;
    if beam <= 1 {
        return Ok(greedy_hyp);
    }

    let mut live = vec![Hypothesis::start()];
    let mut finished = vec![greedy_hyp];
    while !live.is_empty() {
        let mut expansions = Vec::with_capacity(live.len() * beam);
        for hyp in &live {
            let probs = cached(&hyp.tokens)?;
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(beam) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                expansions.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + ln(probs[tok]),
                });
            }
        }
        expansions.sort_by(|a, b| rank(a, b, false));
        expansions.truncate(beam);
        live.clear();
        for hyp in expansions {
            if hyp.done(max_len) {
                finished.push(hyp);
            } else {
                live.push(hyp);
            }
        }
    }
    finished.sort_by(|a, b| rank(a, b, length_normalize));
    Ok(finished.swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Next-word distribution depending only on the previous token.
    fn bigram(table: &[Vec<f64>]) -> impl FnMut(&[TokenId]) -> Result<Vec<f64>> + '_ {
        move |prefix| Ok(table[*prefix.last().unwrap()].clone())
    }

    fn table() -> Vec<Vec<f64>> {
        // 0 pad, 1 bos, 2 eos, 3 a, 4 b
        vec![
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.6, 0.4],
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.3, 0.35, 0.35],
            vec![0.0, 0.0, 0.95, 0.05, 0.0],
        ]
    }

    #[test]
    fn greedy_follows_argmax_and_stops() {
        let t = table();
        let h = greedy(bigram(&t), 10).unwrap();
        assert_eq!(h.tokens, vec![BOS, 3, 3, 3, 3, 3, 3, 3, 3, 3]);
        let h = greedy(bigram(&t), 2).unwrap();
        assert_eq!(h.tokens.len(), 2);
    }

    #[test]
    fn beam_finds_the_better_path() {
        let t = table();
        let g = greedy(bigram(&t), 10).unwrap();
        let b = beam_search(bigram(&t), 3, 10, false).unwrap();
        assert_eq!(b.tokens, vec![BOS, 4, EOS]);
        assert!(b.log_prob > g.log_prob);
        assert!((b.log_prob - (0.4f64 * 0.95).ln()).abs() < 1e-12);
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let t = table();
        assert_eq!(
            beam_search(bigram(&t), 1, 10, true).unwrap(),
            greedy(bigram(&t), 10).unwrap()
        );
    }
}
