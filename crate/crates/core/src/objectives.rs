//! Generation and contrastive objectives.

use serde::{Deserialize, Serialize};
use xpro_tensor::{Tape, Tensor, Var};

use crate::corpus::{LabelVector, TokenId, PAD};
use crate::error::{Error, Result};

/// Added to probabilities inside the cross-entropy log.
pub const PROB_EPS: f64 = 1e-12;
/// Norm below which a mean response counts as degenerate.
pub const EMBED_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Tolerance base θ.
    pub theta: f64,
    /// Negative margin α.
    pub alpha: f64,
    /// Weight of the visual contrastive term.
    pub lambda: f64,
    /// Weight of the textual contrastive term.
    pub delta: f64,
    pub clamp_positive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            theta: 1.5,
            alpha: 0.4,
            lambda: 1.0,
            delta: 0.1,
            clamp_positive: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::config(format!(
                "loss.theta: {} must be > 0",
                self.theta
            )));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "loss.alpha: {} not in [0, 1)",
                self.alpha
            )));
        }
        if !(self.lambda.is_finite() && self.delta.is_finite()) {
            return Err(Error::config("loss.lambda, loss.delta: must be finite"));
        }
        Ok(())
    }
}

/// `θ^(−h_d/h_t)` for a positive pair.
pub fn tolerance_term(yi: &LabelVector, yj: &LabelVector, theta: f64) -> Result<f64> {
    let h_t = yi.total(yj);
    if h_t == 0 {
        return Err(Error::contract(
            "tolerance term needs at least one active label in the pair",
        ));
    }
    Ok(theta.powf(-(yi.hamming(yj) as f64) / h_t as f64))
}

/// `−(1/N^r) Σ ln(p(w) + ε)` over all non-PAD gold tokens of a batch.
///
/// `probs[b]` is `[T_b, |V|]` and `golds[b]` has `T_b` entries.
pub fn cross_entropy(tape: &mut Tape, probs: &[Var], golds: &[&[TokenId]]) -> Result<Var> {
    if probs.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} prediction sequences for {} gold sequences",
            probs.len(),
            golds.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (&p, gold) in probs.iter().zip(golds) {
        if tape.shape(p).first() != Some(&gold.len()) {
            return Err(Error::contract(format!(
                "prediction shape {:?} does not match {} gold tokens",
                tape.shape(p),
                gold.len()
            )));
        }
        let keep: Vec<usize> = (0..gold.len()).filter(|&t| gold[t] != PAD).collect();
        if keep.is_empty() {
            continue;
        }
        let cols: Vec<Vec<usize>> = keep.iter().map(|&t| vec![gold[t]]).collect();
        let rows = tape.gather_rows(p, &keep)?;
        let picked = tape.gather_per_row(rows, &cols)?;
        let logp = tape.log(picked, PROB_EPS);
        let s = tape.sum(logp);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
        count += keep.len();
    }
    let total = total.ok_or_else(|| Error::contract("cross entropy over zero gold tokens"))?;
    Ok(tape.scale(total, -1.0 / count as f64))
}

/// σ: mean over positions followed by L2 normalization, as a `[1, d]` row.
///
/// The flag is set when the mean is (numerically) the zero vector, in which
/// case the output is that vector scaled by `1/EMBED_EPS` rather than a unit
/// vector.
pub fn response_embedding(tape: &mut Tape, responses: Var) -> Result<(Var, bool)> {
    let shape = tape.shape(responses).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::contract(format!(
            "response embedding needs a non-empty [N, d] input, got {shape:?}"
        )));
    }
    let mean = tape.mean_axis(responses, 0)?;
    let norm = tape
        .value(mean)
        .data()
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let unit = tape.l2_normalize(mean, EMBED_EPS);
    let row = tape.reshape(unit, &[1, shape[1]])?;
    Ok((row, norm <= EMBED_EPS))
}

/// Positive-pair indicator and tolerance targets for a batch.
pub fn pair_tables(
    labels: &[LabelVector],
    cfg: &LossConfig,
    adaptive: bool,
) -> Result<(Tensor, Tensor)> {
    let b = labels.len();
    let mut pos = Tensor::zeros([b, b]);
    let mut target = Tensor::zeros([b, b]);
    for i in 0..b {
        for j in 0..b {
            if labels[i].dot(&labels[j]) > 0 {
                pos.data_mut()[i * b + j] = 1.0;
                target.data_mut()[i * b + j] = if adaptive {
                    tolerance_term(&labels[i], &labels[j], cfg.theta)?
                } else {
                    1.0
                };
            }
        }
    }
    Ok((pos, target))
}

/// Multi-label contrastive loss over all ordered pairs of a batch.
///
/// `embeddings` is `[B, d]` with σ-normalized rows. Positive pairs
/// (`y_i·y_j > 0`) contribute `target − cos`, negatives `max(cos − α, 0)`;
/// the sum is divided by `B²`. With `adaptive = false` every target is 1.
pub fn improved_contrastive(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[LabelVector],
    cfg: &LossConfig,
    adaptive: bool,
) -> Result<Var> {
    let b = labels.len();
    if tape.shape(embeddings).first() != Some(&b) || b == 0 {
        return Err(Error::contract(format!(
            "embeddings {:?} do not match batch of {b}",
            tape.shape(embeddings)
        )));
    }
    let (pos, target) = pair_tables(labels, cfg, adaptive)?;
    let neg = pos.map(|p| 1.0 - p);

    let et = tape.transpose(embeddings)?;
    let sim = tape.matmul(embeddings, et)?;

    let neg_sim = tape.neg(sim);
    let gap = tape.add_const(neg_sim, &target)?;
    let mut pos_terms = tape.mul_const(gap, &pos)?;
    if cfg.clamp_positive {
        pos_terms = tape.relu(pos_terms);
    }
    let shifted = tape.add_scalar(sim, -cfg.alpha);
    let hinge = tape.relu(shifted);
    let neg_terms = tape.mul_const(hinge, &neg)?;

    let all = tape.add(pos_terms, neg_terms)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, 1.0 / (b * b) as f64))
}

/// `L_ce + λ L_s + δ L_t`, refusing non-finite terms.
pub fn total_loss(
    tape: &mut Tape,
    ce: Var,
    l_s: Var,
    l_t: Var,
    lambda: f64,
    delta: f64,
) -> Result<Var> {
    for (term, v) in [("L_ce", ce), ("L_s", l_s), ("L_t", l_t)] {
        let value = tape.value(v).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { term, value });
        }
    }
    let ws = tape.scale(l_s, lambda);
    let wt = tape.scale(l_t, delta);
    let acc = tape.add(ce, ws)?;
    Ok(tape.add(acc, wt)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn tolerance_examples() {
        let a = LabelVector::from_active(14, &[0, 2]);
        let b = LabelVector::from_active(14, &[0, 1]);
        let v = tolerance_term(&a, &b, 1.5).unwrap();
        assert!((v - 1.5f64.powf(-0.5)).abs() < 1e-12);
        assert!((v - 0.81650).abs() < 1e-5);
        assert_eq!(tolerance_term(&a, &a, 3.0).unwrap(), 1.0);
        let z = LabelVector::zeros(14);
        assert!(tolerance_term(&z, &z, 1.5).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let onehot = leaf(&mut tape, &[vec![0.0, 1.0, 0.0, 0.0]]);
        let l = cross_entropy(&mut tape, &[onehot], &[&[1]]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-11);

        let uniform = leaf(&mut tape, &[vec![0.25; 4], vec![0.25; 4]]);
        let l = cross_entropy(&mut tape, &[uniform], &[&[1, 3]]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_skips_pad() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[vec![0.1, 0.9], vec![0.5, 0.5], vec![0.3, 0.7]]);
        let a = cross_entropy(&mut tape, &[p], &[&[1, PAD, 1]]).unwrap();
        let expected = -((0.9f64 + PROB_EPS).ln() + (0.7f64 + PROB_EPS).ln()) / 2.0;
        assert!((tape.value(a).item() - expected).abs() < 1e-14);
        assert!(cross_entropy(&mut tape, &[p], &[&[PAD, PAD, PAD]]).is_err());
    }

    #[test]
    fn embedding_unit_and_degenerate() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[vec![3.0, 4.0]]);
        let (e, flag) = response_embedding(&mut tape, x).unwrap();
        assert!(!flag);
        assert_eq!(tape.value(e).data(), &[0.6, 0.8]);

        let x = leaf(&mut tape, &[vec![1.5, -2.0], vec![-1.5, 2.0]]);
        let (e, flag) = response_embedding(&mut tape, x).unwrap();
        assert!(flag);
        assert_eq!(tape.value(e).data(), &[0.0, 0.0]);
    }

    #[test]
    fn contrastive_identical_batch_is_zero() {
        let mut tape = Tape::new();
        let e = leaf(&mut tape, &[vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]]);
        let y = vec![LabelVector::from_active(5, &[1, 3]); 3];
        let l = improved_contrastive(&mut tape, e, &y, &LossConfig::default(), true).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn contrastive_orthogonal_negatives_within_margin() {
        let mut tape = Tape::new();
        let e = leaf(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let y = vec![
            LabelVector::from_active(3, &[0]),
            LabelVector::from_active(3, &[1]),
        ];
        let cfg = LossConfig {
            alpha: 0.2,
            ..LossConfig::default()
        };
        let l = improved_contrastive(&mut tape, e, &y, &cfg, true).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn total_loss_weighting_and_diagnostics() {
        let mut tape = Tape::new();
        let ce = tape.leaf(Tensor::scalar(1.0));
        let ls = tape.leaf(Tensor::scalar(0.5));
        let lt = tape.leaf(Tensor::scalar(0.2));
        let l = total_loss(&mut tape, ce, ls, lt, 1.0, 0.1).unwrap();
        assert!((tape.value(l).item() - 1.52).abs() < 1e-15);
        let l = total_loss(&mut tape, ce, ls, lt, 0.0, 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);

        let bad = tape.leaf(Tensor::scalar(f64::NAN));
        let err = total_loss(&mut tape, ce, ls, bad, 1.0, 0.1).unwrap_err();
        assert!(err.to_string().contains("L_t"), "{err}");
    }
}
