//! Class-related prototype querying, top-γ responding and feature fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};
use xpro_tensor::{nn, ParamId, ParamStore, Tape, Tensor, Var};

use crate::corpus::LabelVector;
use crate::error::{Error, Result};
use crate::init;

/// Denominator guard of the literal linear normalizer.
pub const LINEAR_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalizer {
    /// Softmax over the selected similarities.
    #[default]
    Softmax,
    /// Selected similarities divided by their sum.
    LiteralLinear,
}

/// Which label vector defines candidate prototypes when generating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Every category is a candidate.
    #[default]
    All,
    /// Ground-truth labels; for diagnostics only.
    Oracle,
}

/// Flat `k·N^p + i` indices of the prototypes of every category set in `mask`.
pub fn select_category_prototypes(mask: &LabelVector, per_category: usize) -> Result<Vec<usize>> {
    if mask.is_all_zero() {
        return Err(Error::contract("prototype query with an empty label mask"));
    }
    Ok(mask
        .active()
        .flat_map(|k| (0..per_category).map(move |i| k * per_category + i))
        .collect())
}

/// The mask used for querying: the labels themselves, or all ones when none
/// is set.
pub fn effective_mask(labels: &LabelVector) -> LabelVector {
    if labels.is_all_zero() {
        LabelVector::ones(labels.len())
    } else {
        labels.clone()
    }
}

/// Positions of the `gamma` largest values, largest first; ties go to the
/// lower position. `gamma` is clamped to `row.len()`.
pub fn top_gamma(row: &[f64], gamma: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(gamma.min(row.len()));
    order
}

/// Records top-γ selections, or replays earlier ones so that a perturbed
/// forward pass keeps the same piecewise-constant choice.
#[derive(Debug, Clone, Default)]
pub struct SelectionLog {
    recorded: Vec<Vec<Vec<usize>>>,
    replay: Option<Vec<Vec<Vec<usize>>>>,
    cursor: usize,
}

impl SelectionLog {
    pub fn recording() -> Self {
        Self::default()
    }

    pub fn replaying(selections: Vec<Vec<Vec<usize>>>) -> Self {
        Self {
            replay: Some(selections),
            ..Self::default()
        }
    }

    pub fn into_recorded(self) -> Vec<Vec<Vec<usize>>> {
        self.recorded
    }

    fn next(&mut self, sims: &Tensor, gamma: usize) -> Result<Vec<Vec<usize>>> {
        let pick = match &self.replay {
            Some(frozen) => frozen
                .get(self.cursor)
                .cloned()
                .ok_or_else(|| Error::contract("replayed more selections than were recorded"))?,
            None => sims.rows().map(|r| top_gamma(r, gamma)).collect(),
        };
        self.cursor += 1;
        self.recorded.push(pick.clone());
        Ok(pick)
    }
}

/// Per-head selection of one query: global prototype indices and weights per
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSelection {
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct QueryResult {
    pub heads: Vec<HeadSelection>,
    /// `[N, d]` concatenation of the per-head responses.
    pub response: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtoNetDims {
    /// Feature width C.
    pub feature: usize,
    /// Prototype width D.
    pub proto: usize,
    /// Prototype projection width C_P.
    pub proto_proj: usize,
    /// Query width d.
    pub query: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtoNet {
    pub dims: ProtoNetDims,
    pub gamma: usize,
    pub normalizer: Normalizer,
    pub w_pv: ParamId,
    pub w_v: ParamId,
    pub w_p: ParamId,
    pub w_e: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

/// `p* = pv·W_pv·W_p` and `E = p*·W_e` for every prototype, computed once per
/// forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PrototypeBank {
    pub projected: Var,
    pub transformed: Var,
}

impl ProtoNet {
    /// Registers the parameters in `store` under `group`.
    ///
    /// The fusion layer starts as the identity on the feature block, so an
    /// untrained network passes features through plus a response term.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: ProtoNetDims,
        gamma: usize,
        normalizer: Normalizer,
        group: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.heads == 0 || dims.query % dims.heads != 0 {
            return Err(Error::config(format!(
                "query width {} is not divisible by {} heads",
                dims.query, dims.heads
            )));
        }
        if gamma == 0 {
            return Err(Error::config("gamma must be at least 1"));
        }
        let (c, d) = (dims.feature, dims.query);
        let w_pv = store.add(
            "proto.w_pv",
            init::xavier(rng, dims.proto, dims.proto_proj),
            group,
        );
        let w_v = store.add("proto.w_v", init::xavier(rng, c, d), group);
        let w_p = store.add("proto.w_p", init::xavier(rng, dims.proto_proj, d), group);
        let w_e = store.add("proto.w_e", init::xavier(rng, d, d), group);
        let resp = init::xavier(rng, d, c);
        let mut fw = Tensor::zeros([c + d, c]);
        for i in 0..c {
            fw.data_mut()[i * c + i] = 1.0;
        }
        fw.data_mut()[c * c..].copy_from_slice(resp.data());
        let fuse_w = store.add("proto.fuse_w", fw, group);
        let fuse_b = store.add("proto.fuse_b", Tensor::zeros([c]), group);
        Ok(Self {
            dims,
            gamma,
            normalizer,
            w_pv,
            w_v,
            w_p,
            w_e,
            fuse_w,
            fuse_b,
        })
    }

    pub fn project_prototypes(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        pm: Var,
    ) -> Result<PrototypeBank> {
        let p = tape.matmul(pm, vars[self.w_pv.index()])?;
        let projected = tape.matmul(p, vars[self.w_p.index()])?;
        let transformed = tape.matmul(projected, vars[self.w_e.index()])?;
        Ok(PrototypeBank {
            projected,
            transformed,
        })
    }

    /// Per-head similarities `v*_h · p*_hᵀ / d_h` of `features` (`[N, C]`)
    /// against projected candidates (`[M, d]`).
    pub fn query(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        features: Var,
        candidates: Var,
    ) -> Result<Vec<Var>> {
        similarities(
            tape,
            features,
            vars[self.w_v.index()],
            candidates,
            self.dims.heads,
        )
    }

    /// Top-γ weighting of each head's similarities and the weighted sum of the
    /// transformed candidates (`[M, d]`). `candidates` maps candidate positions
    /// to global prototype indices.
    pub fn respond(
        &self,
        tape: &mut Tape,
        sims: &[Var],
        transformed: Var,
        candidates: &[usize],
        log: &mut SelectionLog,
    ) -> Result<QueryResult> {
        let m = candidates.len();
        let dh = self.dims.query / self.dims.heads;
        let mut parts = Vec::with_capacity(sims.len());
        let mut heads = Vec::with_capacity(sims.len());
        for (h, &s) in sims.iter().enumerate() {
            let picks = log.next(tape.value(s), self.gamma)?;
            let picked = tape.gather_per_row(s, &picks)?;
            let weights = match self.normalizer {
                Normalizer::Softmax => tape.softmax(picked, 1)?,
                Normalizer::LiteralLinear => tape.normalize_linear(picked, LINEAR_EPS),
            };
            heads.push(HeadSelection {
                indices: picks
                    .iter()
                    .map(|row| row.iter().map(|&j| candidates[j]).collect())
                    .collect(),
                weights: tape.value(weights).rows().map(<[f64]>::to_vec).collect(),
            });
            let dense = tape.scatter_cols(weights, &picks, m)?;
            let e_h = tape.slice_cols(transformed, h * dh, (h + 1) * dh)?;
            parts.push(tape.matmul(dense, e_h)?);
        }
        let response = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts)?
        };
        Ok(QueryResult { heads, response })
    }

    /// Query and respond against the candidates of `mask`.
    pub fn query_respond(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        bank: &PrototypeBank,
        features: Var,
        candidates: &[usize],
        log: &mut SelectionLog,
    ) -> Result<QueryResult> {
        let (p, e) = if candidates.len() == tape.shape(bank.projected)[0]
            && candidates.iter().enumerate().all(|(i, &c)| i == c)
        {
            (bank.projected, bank.transformed)
        } else {
            (
                tape.gather_rows(bank.projected, candidates)?,
                tape.gather_rows(bank.transformed, candidates)?,
            )
        };
        let sims = self.query(tape, vars, features, p)?;
        self.respond(tape, &sims, e, candidates, log)
    }

    /// `FCN([feature; response])`, applied per position.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        features: Var,
        responses: Var,
    ) -> Result<Var> {
        fuse(
            tape,
            features,
            responses,
            vars[self.fuse_w.index()],
            vars[self.fuse_b.index()],
        )
    }
}

/// Multi-head scaled similarity; each head divides by its own width.
pub fn similarities(
    tape: &mut Tape,
    features: Var,
    w_v: Var,
    candidates: Var,
    heads: usize,
) -> Result<Vec<Var>> {
    let v = tape.matmul(features, w_v)?;
    let d = tape.shape(v)[1];
    if tape.shape(candidates).get(1) != Some(&d) {
        return Err(Error::Tensor(xpro_tensor::TensorError::ShapeMismatch {
            op: "prototype query",
            lhs: tape.shape(v).to_vec(),
            rhs: tape.shape(candidates).to_vec(),
        }));
    }
    if tape.shape(candidates)[0] == 0 {
        return Err(Error::contract("prototype query with no candidates"));
    }
    let dh = d / heads;
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let (vh, ph) = if heads == 1 {
            (v, candidates)
        } else {
            (
                tape.slice_cols(v, h * dh, (h + 1) * dh)?,
                tape.slice_cols(candidates, h * dh, (h + 1) * dh)?,
            )
        };
        let pt = tape.transpose(ph)?;
        let s = tape.matmul(vh, pt)?;
        out.push(tape.scale(s, 1.0 / dh as f64));
    }
    Ok(out)
}

pub fn fuse(tape: &mut Tape, features: Var, responses: Var, w: Var, b: Var) -> Result<Var> {
    let (nf, nr) = (tape.shape(features)[0], tape.shape(responses)[0]);
    if nf != nr {
        return Err(Error::Tensor(xpro_tensor::TensorError::ShapeMismatch {
            op: "fuse",
            lhs: tape.shape(features).to_vec(),
            rhs: tape.shape(responses).to_vec(),
        }));
    }
    let joined = tape.concat(&[features, responses])?;
    Ok(nn::linear(tape, joined, w, Some(b))?)
}
