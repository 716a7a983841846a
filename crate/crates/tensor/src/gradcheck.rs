//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation size for `(f(p+h) - f(p-h)) / 2h`.
    pub h: f64,
    /// Lower bound on the relative-error denominator. Components whose true
    /// gradient is below this are compared in absolute terms, since the
    /// difference quotient carries roughly `ulp(f) / h` of rounding noise.
    pub floor: f64,
    /// Check at most this many entries per parameter (sampled with `seed`).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-6,
            floor: 1e-4,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub param: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index, analytic and numeric value of the worst entry.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`; two zeros compare as 0.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

fn evaluate<F, E>(f: &mut F, params: &[Tensor]) -> Result<f64, E>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()).into());
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite(format!("objective evaluated to {v}")).into());
    }
    Ok(v)
}

/// Compares the tape gradient of `f` at `params` against central differences.
///
/// `f` receives a fresh tape with every parameter bound as a leaf (in order)
/// and must return a scalar. It is called once for the analytic gradient and
/// twice per checked entry.
pub fn finite_diff_check<F, E>(
    mut f: F,
    params: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(TensorError::NonFinite("objective at the base point".into()).into());
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let n = params[pi].numel();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(k) if k < n => {
                let mut e = sample(&mut rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut report = ParamReport {
            param: pi,
            checked: entries.len(),
            max_rel_error: 0.0,
            worst: None,
        };
        for &e in &entries {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + cfg.h;
            let plus = evaluate(&mut f, &work)?;
            work[pi].data_mut()[e] = orig - cfg.h;
            let minus = evaluate(&mut f, &work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric, cfg.floor);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((e, a, numeric));
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { params: reports })
}
