//! The full pipeline: visual extractor, prototype querying and fusion for
//! both modalities, encoder-decoder and the joint objective.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use xpro_tensor::{load_checkpoint, nn, save_checkpoint, ParamId, ParamStore, Tape, Tensor, Var};

use crate::config::RunConfig;
use crate::corpus::{LabelVector, Sample, TokenId, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::init;
use crate::objectives::{cross_entropy, improved_contrastive, response_embedding, total_loss};
use crate::proto_init::{PrototypeMatrix, Provenance};
use crate::proto_net::{
    effective_mask, select_category_prototypes, HeadSelection, LabelMode, ProtoNet, ProtoNetDims,
    PrototypeBank, SelectionLog,
};
use crate::seq_model::{beam_search, DecoderState, Dropout, Hypothesis, Seq2Seq};

/// Optimizer group of the extractor and encoder-decoder.
pub const GROUP_MODEL: usize = 0;
/// Optimizer group of the prototype matrix, querying and fusion layers.
pub const GROUP_PROTO: usize = 1;

/// Data-dependent sizes a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
}

impl ModelDims {
    pub fn of(sample: &Sample, vocab: &Vocabulary) -> Self {
        Self {
            vocab_size: vocab.len(),
            grid_height: sample.image.height(),
            grid_width: sample.image.width(),
            channels: sample.image.channels(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Prototypes {
    matrix: ParamId,
    net: ProtoNet,
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub ce: Var,
    pub l_s: Var,
    pub l_t: Var,
    /// Samples whose mean response was the zero vector.
    pub degenerate: usize,
}

/// Everything `inspect` reports about one generated report.
#[derive(Debug, Clone)]
pub struct Inspection {
    pub hypothesis: Hypothesis,
    pub mask: LabelVector,
    /// Per head, one row per patch.
    pub patch_heads: Vec<HeadSelection>,
    /// Per head, one row per decoder input position.
    pub token_heads: Vec<HeadSelection>,
    /// Last-layer cross-attention, `[input positions, patches]`.
    pub cross_attention: Tensor,
}

#[derive(Debug, Clone)]
pub struct Xpronet {
    pub cfg: RunConfig,
    pub dims: ModelDims,
    pub store: ParamStore,
    extractor: (ParamId, ParamId),
    prototypes: Option<Prototypes>,
    seq: Seq2Seq,
}

struct Prepared {
    vars: Vec<Var>,
    bank: Option<PrototypeBank>,
    candidates: Vec<usize>,
    memory: Var,
    patch_heads: Vec<HeadSelection>,
}

impl Xpronet {
    /// Builds freshly initialized parameters. `pm` seeds the prototype matrix
    /// and is required unless the prototype pipeline is disabled.
    pub fn new(cfg: &RunConfig, dims: ModelDims, pm: Option<&PrototypeMatrix>) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.model.d_model;
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ 0x51);
        let mut store = ParamStore::new();
        let extractor = (
            store.add(
                "extractor.w",
                init::xavier(&mut rng, dims.channels, c),
                GROUP_MODEL,
            ),
            store.add("extractor.b", Tensor::zeros([c]), GROUP_MODEL),
        );
        let seq = Seq2Seq::register(
            &mut store,
            &cfg.model,
            dims.vocab_size,
            GROUP_MODEL,
            &mut rng,
        )?;
        let prototypes = if cfg.disable_cmpnet {
            None
        } else {
            let pm = pm.ok_or_else(|| {
                Error::config("a prototype matrix is required unless disable_cmpnet is set")
            })?;
            let want = [
                cfg.num_categories,
                cfg.prototypes_per_category,
                cfg.proto_dim(),
            ];
            if pm.shape() != want {
                return Err(Error::config(format!(
                    "prototype matrix has shape {:?}, configuration expects {want:?}",
                    pm.shape()
                )));
            }
            let matrix = store.add("proto.matrix", pm.to_tensor(), GROUP_PROTO);
            let net = ProtoNet::register(
                &mut store,
                ProtoNetDims {
                    feature: c,
                    proto: cfg.proto_dim(),
                    proto_proj: cfg.proto_proj_dim,
                    query: cfg.query_dim,
                    heads: cfg.query_heads,
                },
                cfg.gamma,
                cfg.normalizer,
                GROUP_PROTO,
                &mut rng,
            )?;
            Some(Prototypes { matrix, net })
        };
        Ok(Self {
            cfg: cfg.clone(),
            dims,
            store,
            extractor,
            prototypes,
            seq,
        })
    }

    pub fn seq(&self) -> &Seq2Seq {
        &self.seq
    }

    pub fn has_prototypes(&self) -> bool {
        self.prototypes.is_some()
    }

    /// Current prototype values, if the pipeline is enabled.
    pub fn prototype_matrix(&self) -> Option<PrototypeMatrix> {
        let p = self.prototypes?;
        let (n_l, n_p, d) = (
            self.cfg.num_categories,
            self.cfg.prototypes_per_category,
            self.cfg.proto_dim(),
        );
        PrototypeMatrix::new(
            n_l,
            n_p,
            d,
            self.store.get(p.matrix).data().to_vec(),
            vec![Provenance::Loaded; n_l * n_p],
        )
        .ok()
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        let img = &sample.image;
        let got = (img.height(), img.width(), img.channels());
        let want = (
            self.dims.grid_height,
            self.dims.grid_width,
            self.dims.channels,
        );
        if got != want {
            return Err(Error::data(format!(
                "sample {} has grid {got:?}, model expects {want:?}",
                sample.id
            )));
        }
        if sample.labels.len() != self.cfg.num_categories {
            return Err(Error::data(format!(
                "sample {} has {} labels, model expects {}",
                sample.id,
                sample.labels.len(),
                self.cfg.num_categories
            )));
        }
        Ok(())
    }

    fn visual_features(&self, tape: &mut Tape, vars: &[Var], sample: &Sample) -> Result<Var> {
        let patches = tape.leaf(sample.image.patches());
        let (w, b) = self.extractor;
        Ok(nn::linear(
            tape,
            patches,
            vars[w.index()],
            Some(vars[b.index()]),
        )?)
    }

    fn bank(&self, tape: &mut Tape, vars: &[Var]) -> Result<Option<PrototypeBank>> {
        match self.prototypes {
            Some(p) => Ok(Some(p.net.project_prototypes(
                tape,
                vars,
                vars[p.matrix.index()],
            )?)),
            None => Ok(None),
        }
    }

    /// Candidate masks for a training batch: each sample's labels (all
    /// categories for an all-normal sample), replaced by the all-ones mask
    /// with probability `label_mask_dropout` when `rng` is given.
    pub fn training_masks(
        &self,
        batch: &[&Sample],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Vec<LabelVector> {
        let p = self.cfg.label_mask_dropout;
        match rng {
            Some(rng) if p > 0.0 => batch
                .iter()
                .map(|s| {
                    if rng.random_bool(p) {
                        LabelVector::ones(self.cfg.num_categories)
                    } else {
                        effective_mask(&s.labels)
                    }
                })
                .collect(),
            _ => batch.iter().map(|s| effective_mask(&s.labels)).collect(),
        }
    }

    /// Joint loss of a teacher-forced batch; `masks[b]` selects the
    /// candidate prototypes of sample `b`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &[&Sample],
        masks: &[LabelVector],
        drop: &mut Dropout,
        log: &mut SelectionLog,
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if masks.len() != batch.len() {
            return Err(Error::contract(format!(
                "{} masks for a batch of {}",
                masks.len(),
                batch.len()
            )));
        }
        let bank = self.bank(tape, vars)?;
        let mut probs = Vec::with_capacity(batch.len());
        let mut golds: Vec<&[TokenId]> = Vec::with_capacity(batch.len());
        let mut emb_s = Vec::new();
        let mut emb_t = Vec::new();
        let mut degenerate = 0;

        for (sample, mask) in batch.iter().zip(masks) {
            self.check_sample(sample)?;
            if sample.report.len() < 2 {
                return Err(Error::data(format!(
                    "sample {} has an empty report",
                    sample.id
                )));
            }
            let (input, gold) = (
                &sample.report[..sample.report.len() - 1],
                &sample.report[1..],
            );
            let v_s = self.visual_features(tape, vars, sample)?;
            let v_t = self.seq.embed_report(tape, vars, input)?;
            let (l_s, l_t) = match (self.prototypes, &bank) {
                (Some(p), Some(bank)) => {
                    let cands = select_category_prototypes(mask, self.cfg.prototypes_per_category)?;
                    let qs = p.net.query_respond(tape, vars, bank, v_s, &cands, log)?;
                    let qt = p.net.query_respond(tape, vars, bank, v_t, &cands, log)?;
                    let (es, ds) = response_embedding(tape, qs.response)?;
                    let (et, dt) = response_embedding(tape, qt.response)?;
                    degenerate += usize::from(ds) + usize::from(dt);
                    emb_s.push(es);
                    emb_t.push(et);
                    (
                        p.net.fuse(tape, vars, v_s, qs.response)?,
                        p.net.fuse(tape, vars, v_t, qt.response)?,
                    )
                }
                _ => (v_s, v_t),
            };
            let memory = self.seq.encode(tape, vars, l_s, drop)?;
            let logits = self.seq.decode(tape, vars, memory, l_t, drop, None)?;
            probs.push(tape.softmax(logits, 1)?);
            golds.push(gold);
        }

        let ce = cross_entropy(tape, &probs, &golds)?;
        let (l_s, l_t) = if self.prototypes.is_some() {
            let labels: Vec<LabelVector> = batch.iter().map(|s| s.labels.clone()).collect();
            let adaptive = !self.cfg.disable_imlcs;
            let es = stack_rows(tape, &emb_s)?;
            let et = stack_rows(tape, &emb_t)?;
            (
                improved_contrastive(tape, es, &labels, &self.cfg.loss, adaptive)?,
                improved_contrastive(tape, et, &labels, &self.cfg.loss, adaptive)?,
            )
        } else {
            (
                tape.leaf(Tensor::scalar(0.0)),
                tape.leaf(Tensor::scalar(0.0)),
            )
        };
        let total = total_loss(
            tape,
            ce,
            l_s,
            l_t,
            self.cfg.loss.lambda,
            self.cfg.loss.delta,
        )?;
        Ok(BatchLoss {
            total,
            ce,
            l_s,
            l_t,
            degenerate,
        })
    }

    /// Label mask used when generating for `sample`.
    pub fn inference_mask(&self, sample: &Sample) -> LabelVector {
        match self.cfg.inference_label_mode {
            LabelMode::All => LabelVector::ones(self.cfg.num_categories),
            LabelMode::Oracle => effective_mask(&sample.labels),
        }
    }

    fn prepare(&self, tape: &mut Tape, sample: &Sample) -> Result<Prepared> {
        self.check_sample(sample)?;
        let vars = self.store.bind(tape);
        let bank = self.bank(tape, &vars)?;
        let candidates = select_category_prototypes(
            &self.inference_mask(sample),
            self.cfg.prototypes_per_category,
        )?;
        let v_s = self.visual_features(tape, &vars, sample)?;
        let (l_s, patch_heads) = match (self.prototypes, &bank) {
            (Some(p), Some(bank)) => {
                let mut log = SelectionLog::recording();
                let q = p
                    .net
                    .query_respond(tape, &vars, bank, v_s, &candidates, &mut log)?;
                (p.net.fuse(tape, &vars, v_s, q.response)?, q.heads)
            }
            _ => (v_s, Vec::new()),
        };
        let memory = self.seq.encode(tape, &vars, l_s, &mut Dropout::eval())?;
        Ok(Prepared {
            vars,
            bank,
            candidates,
            memory,
            patch_heads,
        })
    }

    /// Decoder input for `prefix`, with textual prototype responses fused in.
    fn textual_input(
        &self,
        tape: &mut Tape,
        prep: &Prepared,
        prefix: &[TokenId],
    ) -> Result<(Var, Vec<HeadSelection>)> {
        let v_t = self.seq.embed_report(tape, &prep.vars, prefix)?;
        match (self.prototypes, &prep.bank) {
            (Some(p), Some(bank)) => {
                let mut log = SelectionLog::recording();
                let q =
                    p.net
                        .query_respond(tape, &prep.vars, bank, v_t, &prep.candidates, &mut log)?;
                Ok((p.net.fuse(tape, &prep.vars, v_t, q.response)?, q.heads))
            }
            _ => Ok((v_t, Vec::new())),
        }
    }

    /// Next-word distribution for `prefix` given an image.
    pub fn next_word(&self, sample: &Sample, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let prep = self.prepare(&mut tape, sample)?;
        let (l_t, _) = self.textual_input(&mut tape, &prep, prefix)?;
        self.seq
            .decode_step(&mut tape, &prep.vars, prep.memory, l_t)
    }

    /// Fused decoder input row for `token` at `position`.
    fn textual_row(
        &self,
        tape: &mut Tape,
        prep: &Prepared,
        token: TokenId,
        position: usize,
    ) -> Result<Var> {
        let v_t = self.seq.embed_at(tape, &prep.vars, token, position)?;
        match (self.prototypes, &prep.bank) {
            (Some(p), Some(bank)) => {
                let mut log = SelectionLog::recording();
                let q =
                    p.net
                        .query_respond(tape, &prep.vars, bank, v_t, &prep.candidates, &mut log)?;
                p.net.fuse(tape, &prep.vars, v_t, q.response)
            }
            _ => Ok(v_t),
        }
    }

    /// Decodes a report; `beam_size == 1` is greedy.
    ///
    /// Each step decodes only the newest position against cached keys and
    /// values of its prefix, which gives the same distribution as decoding
    /// the whole prefix. Textual responses are computed per position.
    pub fn generate(&self, sample: &Sample, beam_size: usize) -> Result<Hypothesis> {
        let mut tape = Tape::new();
        let prep = self.prepare(&mut tape, sample)?;
        let memory = self.seq.memory_cache(&mut tape, &prep.vars, prep.memory)?;
        let mark = tape.len();
        let mut states: HashMap<Vec<TokenId>, DecoderState> = HashMap::new();
        let empty = DecoderState::default();
        let step = |prefix: &[TokenId]| -> Result<Vec<f64>> {
            let mut dist = Vec::new();
            for end in 1..=prefix.len() {
                if end < prefix.len() && states.contains_key(&prefix[..end]) {
                    continue;
                }
                let parent = if end == 1 {
                    &empty
                } else {
                    &states[&prefix[..end - 1]]
                };
                let x = self.textual_row(&mut tape, &prep, prefix[end - 1], end - 1)?;
                let (d, state) = self
                    .seq
                    .decode_next(&mut tape, &prep.vars, &memory, parent, x)?;
                tape.truncate(mark);
                states.insert(prefix[..end].to_vec(), state);
                dist = d;
            }
            Ok(dist)
        };
        beam_search(step, beam_size, self.cfg.model.max_len, true)
    }

    /// Generates a report and records prototype selections for every patch
    /// and every decoder input position.
    pub fn inspect(&self, sample: &Sample, beam_size: usize) -> Result<Inspection> {
        let hypothesis = self.generate(sample, beam_size)?;
        let mut tape = Tape::new();
        let prep = self.prepare(&mut tape, sample)?;
        let tokens = &hypothesis.tokens;
        let input = if tokens.last() == Some(&EOS) {
            &tokens[..tokens.len() - 1]
        } else {
            &tokens[..]
        };
        let (l_t, token_heads) = self.textual_input(&mut tape, &prep, input)?;
        let mut capture = Vec::new();
        self.seq.decode(
            &mut tape,
            &prep.vars,
            prep.memory,
            l_t,
            &mut Dropout::eval(),
            Some(&mut capture),
        )?;
        Ok(Inspection {
            mask: self.inference_mask(sample),
            patch_heads: prep.patch_heads,
            token_heads,
            cross_attention: capture.pop().expect("decoder has at least one layer"),
            hypothesis,
        })
    }

    fn metadata(&self) -> String {
        json!({ "config": self.cfg, "dims": self.dims }).to_string()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.store, &self.metadata())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (stored, meta) = load_checkpoint(path)?;
        #[derive(Deserialize)]
        struct Meta {
            config: RunConfig,
            dims: ModelDims,
        }
        let meta: Meta = serde_json::from_str(&meta).map_err(|e| {
            Error::data(format!("{}: bad checkpoint metadata: {e}", path.display()))
        })?;
        let cfg = meta.config;
        let placeholder = if cfg.disable_cmpnet {
            None
        } else {
            let (n_l, n_p, d) = (
                cfg.num_categories,
                cfg.prototypes_per_category,
                cfg.proto_dim(),
            );
            Some(PrototypeMatrix::new(
                n_l,
                n_p,
                d,
                vec![0.0; n_l * n_p * d],
                vec![Provenance::Loaded; n_l * n_p],
            )?)
        };
        let mut model = Self::new(&cfg, meta.dims, placeholder.as_ref())?;
        model.store.load_from(&stored)?;
        Ok(model)
    }
}

/// `[1, d]` rows to a `[B, d]` matrix.
fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let d = tape.shape(rows[0])[1];
    let joined = if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat(rows)?
    };
    Ok(tape.reshape(joined, &[rows.len(), d])?)
}

impl Inspection {
    /// Line-delimited JSON records: one per patch and head, one per generated
    /// word and head, then the report.
    pub fn records(
        &self,
        sample_id: &str,
        vocab: &Vocabulary,
        per_category: usize,
    ) -> Result<Vec<serde_json::Value>> {
        let pair = |flat: usize| [flat / per_category, flat % per_category];
        let mut out = Vec::new();
        for (h, head) in self.patch_heads.iter().enumerate() {
            for (pos, (idx, w)) in head.indices.iter().zip(&head.weights).enumerate() {
                out.push(json!({
                    "kind": "patch",
                    "id": sample_id,
                    "position": pos,
                    "head": h,
                    "indices": idx.iter().map(|&f| pair(f)).collect::<Vec<_>>(),
                    "weights": w,
                }));
            }
        }
        // Input position t feeds word t, generated at step t - 1.
        let tokens = &self.hypothesis.tokens;
        for t in 1..self.cross_attention.shape()[0].min(tokens.len()) {
            let attn = self.cross_attention.row(t - 1);
            let aligned = attn
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &a)| if a > b.1 { (i, a) } else { b },
                )
                .0;
            for (h, head) in self.token_heads.iter().enumerate() {
                let idx = &head.indices[t];
                let overlap = match self.patch_heads.get(h) {
                    Some(ph) => idx
                        .iter()
                        .filter(|i| ph.indices[aligned].contains(i))
                        .count(),
                    None => 0,
                };
                out.push(json!({
                    "kind": "token",
                    "id": sample_id,
                    "position": t,
                    "token": vocab.token(tokens[t])?,
                    "head": h,
                    "indices": idx.iter().map(|&f| pair(f)).collect::<Vec<_>>(),
                    "weights": head.weights[t],
                    "aligned_patch": aligned,
                    "overlap": overlap,
                }));
            }
        }
        out.push(json!({
            "kind": "report",
            "id": sample_id,
            "mask": self.mask.bits(),
            "tokens": tokens.iter().map(|&t| vocab.token(t).map(str::to_string)).collect::<Result<Vec<_>>>()?,
            "text": vocab.decode(tokens),
            "log_prob": self.hypothesis.log_prob,
        }));
        Ok(out)
    }
}
