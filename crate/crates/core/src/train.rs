//! Training loop, evaluation and report generation over sample sets.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use xpro_tensor::{AdamConfig, AdamState, ParamStore, Tape, Tensor};

use crate::config::RunConfig;
use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{ModelDims, Xpronet, GROUP_MODEL, GROUP_PROTO};
use crate::proto_init::{
    build_class_feature_sets, init_prototype_matrix, GlobalExtractor, PrototypeInit,
    PrototypeMatrix, RANDOM_PM_STD,
};
use crate::proto_net::SelectionLog;
use crate::seq_model::{Dropout, Hypothesis};

/// Learning-rate halvings tried before a diverging run is abandoned.
pub const MAX_LR_RETRIES: usize = 3;

/// Prototype matrix a run starts from: per-class cluster means of the
/// training split, or random rows when initialization is disabled. `None`
/// when the prototype pipeline is off.
pub fn initial_prototypes(
    cfg: &RunConfig,
    dims: ModelDims,
    train: &[Sample],
) -> Result<Option<PrototypeInit>> {
    if cfg.disable_cmpnet {
        return Ok(None);
    }
    let (n_l, n_p, d) = (
        cfg.num_categories,
        cfg.prototypes_per_category,
        cfg.proto_dim(),
    );
    if cfg.disable_pi {
        return Ok(Some(PrototypeInit {
            matrix: PrototypeMatrix::random(n_l, n_p, d, RANDOM_PM_STD, cfg.seed),
            clusterings: vec![None; n_l],
        }));
    }
    let extractor = GlobalExtractor::new(
        (dims.grid_height, dims.grid_width, dims.channels),
        dims.vocab_size,
        cfg.global_visual_dim,
        cfg.global_text_dim,
        cfg.seed,
    );
    let sets = build_class_feature_sets(train, n_l, &extractor)?;
    init_prototype_matrix(&sets, n_p, d, cfg.seed).map(Some)
}

/// Mean loss terms of one epoch and the validation score after it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub l_fnl: f64,
    pub val_bleu_4: Option<f64>,
    pub lr_model: f64,
    pub lr_prototype: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation BLEU-4 (the last
    /// epoch when there is no validation split).
    pub model: Xpronet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

struct Optimizers {
    model: AdamState,
    proto: AdamState,
}

impl Optimizers {
    fn new(store: &ParamStore, cfg: &RunConfig) -> Self {
        let make = |group: usize, lr: f64| {
            let ids = store.ids_in_group(group);
            let shapes: Vec<&[usize]> = ids.iter().map(|&id| store.get(id).shape()).collect();
            AdamState::new(
                AdamConfig {
                    lr,
                    ..AdamConfig::default()
                },
                &shapes,
            )
        };
        Self {
            model: make(GROUP_MODEL, cfg.lr_model),
            proto: make(GROUP_PROTO, cfg.lr_prototype),
        }
    }

    fn scale(&mut self, factor: f64) {
        self.model.decay_lr(factor);
        self.proto.decay_lr(factor);
    }
}

fn finite_or_diverged(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} is {value}")))
    }
}

/// One pass over `order`; returns mean loss terms.
fn run_epoch(
    model: &mut Xpronet,
    opt: &mut Optimizers,
    train: &[Sample],
    order: &[usize],
    drop_rng: &mut ChaCha8Rng,
    mask_rng: &mut ChaCha8Rng,
) -> Result<[f64; 4]> {
    let mut sums = [0.0; 4];
    let mut batches = 0usize;
    let model_ids = model.store.ids_in_group(GROUP_MODEL);
    let proto_ids = model.store.ids_in_group(GROUP_PROTO);
    for chunk in order.chunks(model.cfg.batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape);
        let masks = model.training_masks(&batch, Some(mask_rng));
        let mut drop = Dropout::train(model.cfg.model.dropout, drop_rng);
        let loss = match model.batch_loss(
            &mut tape,
            &vars,
            &batch,
            &masks,
            &mut drop,
            &mut SelectionLog::recording(),
        ) {
            Err(Error::NonFinite { term, value }) => {
                return Err(Error::Divergence(format!("{term} became {value}")))
            }
            other => other?,
        };
        let grads = tape.backward(loss.total)?;
        let collect = |ids: &[xpro_tensor::ParamId]| -> Result<Vec<Tensor>> {
            ids.iter()
                .map(|&id| {
                    let g = grads.wrt(vars[id.index()]);
                    finite_or_diverged(g.data().iter().map(|v| v.abs()).sum(), "gradient")?;
                    Ok(g)
                })
                .collect()
        };
        let g_model = collect(&model_ids)?;
        let g_proto = collect(&proto_ids)?;
        {
            let mut params = model.store.group_values_mut(GROUP_MODEL);
            opt.model
                .step(&mut params, &g_model.iter().collect::<Vec<_>>())?;
        }
        if !proto_ids.is_empty() {
            let mut params = model.store.group_values_mut(GROUP_PROTO);
            opt.proto
                .step(&mut params, &g_proto.iter().collect::<Vec<_>>())?;
        }
        for (s, v) in sums
            .iter_mut()
            .zip([loss.ce, loss.l_s, loss.l_t, loss.total])
        {
            *s += tape.value(v).item();
        }
        batches += 1;
    }
    Ok(sums.map(|s| s / batches.max(1) as f64))
}

/// Trains a model from scratch.
///
/// Every epoch shuffles the training set (seeded), takes one Adam step per
/// batch for each parameter group, then decays both learning rates. If the
/// loss or a gradient turns non-finite, the epoch is restarted from its
/// initial state with halved learning rates, at most [`MAX_LR_RETRIES`] times.
pub fn train(
    cfg: &RunConfig,
    dims: ModelDims,
    pm: Option<&PrototypeMatrix>,
    train: &[Sample],
    val: &[Sample],
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let mut model = Xpronet::new(cfg, dims, pm)?;
    let mut opt = Optimizers::new(&model.store, cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4452_4f50);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4d41_534b);
    let mut retries = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let means = loop {
            let snapshot = (
                model.store.clone(),
                opt.model.clone(),
                opt.proto.clone(),
                drop_rng.clone(),
                mask_rng.clone(),
            );
            match run_epoch(
                &mut model,
                &mut opt,
                train,
                &order,
                &mut drop_rng,
                &mut mask_rng,
            ) {
                Ok(m) if m.iter().all(|v| v.is_finite()) => break m,
                Ok(_) | Err(Error::Divergence(_)) if retries < MAX_LR_RETRIES => {
                    retries += 1;
                    (model.store, opt.model, opt.proto, drop_rng, mask_rng) = snapshot;
                    opt.scale(0.5);
                    log::warn!(
                        "epoch {epoch}: divergence, retrying with lr {:.3e}/{:.3e}",
                        opt.model.lr,
                        opt.proto.lr
                    );
                }
                Ok(m) => return Err(Error::Divergence(format!("epoch {epoch} losses {m:?}"))),
                Err(e) => return Err(e),
            }
        };
        let record_lrs = (opt.model.lr, opt.proto.lr);
        opt.scale(cfg.lr_decay);

        let val_bleu_4 = if val.is_empty() {
            None
        } else {
            Some(
                evaluate(&model, val, cfg.validation_beam_size, cfg.jobs)?
                    .metrics
                    .bleu_4,
            )
        };
        let score = val_bleu_4.unwrap_or(f64::NEG_INFINITY);
        if best
            .as_ref()
            .is_none_or(|(b, _, _)| score > *b || val_bleu_4.is_none())
        {
            best = Some((score, epoch, model.store.clone()));
        }
        log::info!(
            "epoch {epoch}: L_ce {:.4} L_s {:.4} L_t {:.4} L_fnl {:.4} val BLEU-4 {} ({:.1}s)",
            means[0],
            means[1],
            means[2],
            means[3],
            val_bleu_4.map_or("-".to_string(), |b| format!("{b:.4}")),
            started.elapsed().as_secs_f64()
        );
        history.push(EpochRecord {
            epoch,
            l_ce: means[0],
            l_s: means[1],
            l_t: means[2],
            l_fnl: means[3],
            val_bleu_4,
            lr_model: record_lrs.0,
            lr_prototype: record_lrs.1,
        });
    }

    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => 0,
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// `epoch,L_ce,L_s,L_t,L_fnl`, one row per epoch.
pub fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,L_ce,L_s,L_t,L_fnl")?;
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.l_ce, r.l_s, r.l_t, r.l_fnl
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Generates a report per sample, in input order. `jobs > 1` spreads samples
/// over a thread pool; results do not depend on it.
pub fn generate_reports(
    model: &Xpronet,
    samples: &[Sample],
    beam: usize,
    jobs: usize,
) -> Result<Vec<Hypothesis>> {
    if jobs <= 1 {
        return samples.iter().map(|s| model.generate(s, beam)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| {
        samples
            .par_iter()
            .map(|s| model.generate(s, beam))
            .collect()
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub hypotheses: Vec<Hypothesis>,
}

pub fn evaluate(
    model: &Xpronet,
    samples: &[Sample],
    beam: usize,
    jobs: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::data("cannot evaluate an empty split"));
    }
    let hypotheses = generate_reports(model, samples, beam, jobs)?;
    let pairs: Vec<_> = hypotheses
        .iter()
        .zip(samples)
        .map(|(h, s)| (h.tokens.clone(), s.report.clone()))
        .collect();
    Ok(Evaluation {
        metrics: MetricsReport::compute(&pairs),
        hypotheses,
    })
}
