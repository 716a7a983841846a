//! Acceptance criteria, one line of output each. Run with
//! `cargo test -p xpronet --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xpro_tensor::{finite_diff_check, GradCheckConfig, ParamStore, Tape, Tensor, Var};
use xpronet::config::RunConfig;
use xpronet::corpus::{
    build_vocabulary, generate_corpus, split_corpus, CorpusSpec, LabelVector, Sample,
};
use xpronet::metrics::{bleu, rouge_l_pair, MetricsReport};
use xpronet::model::{ModelDims, Xpronet};
use xpronet::objectives::{
    cross_entropy, improved_contrastive, response_embedding, tolerance_term, LossConfig,
};
use xpronet::proto_init::{
    build_class_feature_sets, init_prototype_matrix, kmeans, GlobalExtractor, Provenance,
};
use xpronet::proto_net::{
    select_category_prototypes, Normalizer, ProtoNet, ProtoNetDims, SelectionLog,
};
use xpronet::seq_model::{Dropout, ModelConfig, Seq2Seq};
use xpronet::train::{evaluate, initial_prototypes, train};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor {
    Tensor::from_rows(&rand_rows(rng, shape[0], shape[1])).unwrap()
}

fn rand_labels(rng: &mut ChaCha8Rng, n: usize) -> LabelVector {
    let bits: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
    LabelVector::try_from(bits).unwrap()
}

fn store_values(store: &ParamStore) -> Vec<Tensor> {
    store.ids().map(|id| store.get(id).clone()).collect()
}

fn tiny_config() -> RunConfig {
    RunConfig {
        prototypes_per_category: 3,
        gamma: 2,
        query_heads: 2,
        query_dim: 8,
        proto_proj_dim: 6,
        global_visual_dim: 4,
        global_text_dim: 4,
        model: ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 12,
            dropout: 0.0,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    }
}

fn corpus(num_samples: usize, seed: u64) -> (Vec<Sample>, ModelDims) {
    let spec = CorpusSpec {
        num_samples,
        seed,
        ..CorpusSpec::default()
    };
    let vocab = build_vocabulary(&spec);
    let samples = generate_corpus(&spec).unwrap();
    let dims = ModelDims::of(&samples[0], &vocab);
    (samples, dims)
}

/// Finite-difference check of every differentiable path of the pipeline.
fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let cfg = GradCheckConfig {
        max_entries: Some(24),
        ..GradCheckConfig::default()
    };
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // Objectives: cross-entropy, σ and the contrastive loss.
    let golds: Vec<Vec<usize>> = vec![vec![1, 4, 0, 2], vec![3, 3, 5]];
    let params = vec![rand_tensor(&mut rng, [4, 6]), rand_tensor(&mut rng, [3, 6])];
    let r = finite_diff_check(
        |t: &mut Tape, v: &[Var]| -> xpronet::Result<Var> {
            let probs: Vec<Var> = v
                .iter()
                .map(|&x| t.softmax(x, 1))
                .collect::<Result<_, _>>()?;
            let g: Vec<&[usize]> = golds.iter().map(Vec::as_slice).collect();
            cross_entropy(t, &probs, &g)
        },
        &params,
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    worst.push(("cross_entropy", r.max_rel_error()));

    let labels: Vec<LabelVector> = (0..4).map(|_| rand_labels(&mut rng, 5)).collect();
    let loss_cfg = LossConfig::default();
    let params: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, [3, 5])).collect();
    let r = finite_diff_check(
        |t: &mut Tape, v: &[Var]| -> xpronet::Result<Var> {
            let rows: Vec<Var> = v
                .iter()
                .map(|&x| response_embedding(t, x).map(|(e, _)| e))
                .collect::<Result<_, _>>()?;
            let stacked = stack(t, &rows)?;
            improved_contrastive(t, stacked, &labels, &loss_cfg, true)
        },
        &params,
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    worst.push(("improved_contrastive", r.max_rel_error()));

    // Prototype querying, responding and fusion with selections held fixed.
    for normalizer in [Normalizer::Softmax, Normalizer::LiteralLinear] {
        let mut store = ParamStore::new();
        let pm = store.add("pm", rand_tensor(&mut rng, [12, 6]), 0);
        let net = ProtoNet::register(
            &mut store,
            ProtoNetDims {
                feature: 5,
                proto: 6,
                proto_proj: 4,
                query: 4,
                heads: 2,
            },
            3,
            normalizer,
            0,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let feats = store.add("x", rand_tensor(&mut rng, [4, 5]), 0);
        let candidates: Vec<usize> = vec![0, 2, 3, 5, 7, 8, 11];
        let mut recorded = SelectionLog::recording();
        {
            let mut t = Tape::new();
            let v = store.bind(&mut t);
            let bank = net.project_prototypes(&mut t, &v, v[pm.index()]).unwrap();
            net.query_respond(
                &mut t,
                &v,
                &bank,
                v[feats.index()],
                &candidates,
                &mut recorded,
            )
            .unwrap();
        }
        let picks = recorded.into_recorded();
        let r = finite_diff_check(
            |t: &mut Tape, v: &[Var]| -> xpronet::Result<Var> {
                let mut log = SelectionLog::replaying(picks.clone());
                let bank = net.project_prototypes(t, v, v[pm.index()])?;
                let q = net.query_respond(t, v, &bank, v[feats.index()], &candidates, &mut log)?;
                let fused = net.fuse(t, v, v[feats.index()], q.response)?;
                let sq = t.mul(fused, fused)?;
                Ok(t.sum(sq))
            },
            &store_values(&store),
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        worst.push((
            match normalizer {
                Normalizer::Softmax => "proto_net (softmax)",
                Normalizer::LiteralLinear => "proto_net (linear)",
            },
            r.max_rel_error(),
        ));
    }

    // Encoder-decoder under teacher forcing.
    let mut store = ParamStore::new();
    let mcfg = ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 12,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let seq = Seq2Seq::register(&mut store, &mcfg, 9, 0, &mut rng).map_err(|e| e.to_string())?;
    let source = store.add("source", rand_tensor(&mut rng, [5, 8]), 0);
    let tokens = [1usize, 4, 6, 8, 5];
    let r = finite_diff_check(
        |t: &mut Tape, v: &[Var]| -> xpronet::Result<Var> {
            let memory = seq.encode(t, v, v[source.index()], &mut Dropout::eval())?;
            let target = seq.embed_report(t, v, &tokens[..4])?;
            let logits = seq.decode(t, v, memory, target, &mut Dropout::eval(), None)?;
            let probs = t.softmax(logits, 1)?;
            cross_entropy(t, &[probs], &[&tokens[1..]])
        },
        &store_values(&store),
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    worst.push(("seq2seq", r.max_rel_error()));

    // The joint objective of the full model on a two-sample batch.
    let (samples, dims) = corpus(8, 3);
    let run = tiny_config();
    let init = initial_prototypes(&run, dims, &samples)
        .map_err(|e| e.to_string())?
        .unwrap();
    let model = Xpronet::new(&run, dims, Some(&init.matrix)).map_err(|e| e.to_string())?;
    let batch: Vec<&Sample> = samples
        .iter()
        .filter(|s| !s.labels.is_all_zero())
        .take(2)
        .collect();
    let masks = model.training_masks(&batch, None);
    let mut recorded = SelectionLog::recording();
    {
        let mut t = Tape::new();
        let v = model.store.bind(&mut t);
        model
            .batch_loss(
                &mut t,
                &v,
                &batch,
                &masks,
                &mut Dropout::eval(),
                &mut recorded,
            )
            .map_err(|e| e.to_string())?;
    }
    let picks = recorded.into_recorded();
    let r = finite_diff_check(
        |t: &mut Tape, v: &[Var]| -> xpronet::Result<Var> {
            let mut log = SelectionLog::replaying(picks.clone());
            Ok(model
                .batch_loss(t, v, &batch, &masks, &mut Dropout::eval(), &mut log)?
                .total)
        },
        &store_values(&model.store),
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    worst.push(("full L_fnl (B=2)", r.max_rel_error()));

    let elapsed = started.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(
        max < 1e-4 && elapsed < 120.0,
        format!("max rel error {max:.2e} < 1e-4 in {elapsed:.1}s [{detail}]"),
    )
}

fn stack(t: &mut Tape, rows: &[Var]) -> xpronet::Result<Var> {
    let d = t.shape(rows[0])[1];
    let cols: Vec<Var> = rows
        .iter()
        .map(|&r| t.reshape(r, &[d, 1]))
        .collect::<Result<_, _>>()?;
    let wide = t.concat(&cols)?;
    Ok(t.transpose(wide)?)
}

fn sigma(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect();
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    mean.iter().map(|v| v / norm).collect()
}

/// Pair-by-pair evaluation of the contrastive loss from raw responses.
fn contrastive_oracle(
    responses: &[Vec<Vec<f64>>],
    labels: &[LabelVector],
    cfg: &LossConfig,
) -> f64 {
    let emb: Vec<Vec<f64>> = responses.iter().map(|r| sigma(r)).collect();
    let b = labels.len();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            let cos: f64 = emb[i].iter().zip(&emb[j]).map(|(x, y)| x * y).sum();
            let shared = labels[i]
                .bits()
                .iter()
                .zip(labels[j].bits())
                .any(|(x, y)| *x == 1 && *y == 1);
            if shared {
                let differ = labels[i]
                    .bits()
                    .iter()
                    .zip(labels[j].bits())
                    .filter(|(x, y)| x != y)
                    .count();
                let active: usize = labels[i]
                    .bits()
                    .iter()
                    .chain(labels[j].bits())
                    .map(|&x| x as usize)
                    .sum();
                total += cfg.theta.powf(-(differ as f64) / active as f64) - cos;
            } else {
                total += (cos - cfg.alpha).max(0.0);
            }
        }
    }
    total / (b * b) as f64
}

fn contrastive_via_tape(
    responses: &[Vec<Vec<f64>>],
    labels: &[LabelVector],
    cfg: &LossConfig,
    adaptive: bool,
) -> f64 {
    let mut t = Tape::new();
    let rows: Vec<Var> = responses
        .iter()
        .map(|r| {
            let x = t.leaf(Tensor::from_rows(r).unwrap());
            response_embedding(&mut t, x).unwrap().0
        })
        .collect();
    let e = stack(&mut t, &rows).unwrap();
    let l = improved_contrastive(&mut t, e, labels, cfg, adaptive).unwrap();
    t.value(l).item()
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = LossConfig::default();
    let mut max_diff: f64 = 0.0;
    for _ in 0..50 {
        let b = rng.random_range(1..=6);
        let d = rng.random_range(2..=6);
        let labels: Vec<LabelVector> = (0..b).map(|_| rand_labels(&mut rng, 6)).collect();
        let responses: Vec<Vec<Vec<f64>>> = (0..b)
            .map(|_| {
                let n = rng.random_range(1..=4);
                rand_rows(&mut rng, n, d)
            })
            .collect();
        let got = contrastive_via_tape(&responses, &labels, &cfg, true);
        max_diff = max_diff.max((got - contrastive_oracle(&responses, &labels, &cfg)).abs());
    }
    let yi = LabelVector::try_from(vec![1, 0, 1, 0, 0]).unwrap();
    let yj = LabelVector::try_from(vec![1, 1, 0, 0, 0]).unwrap();
    let tol = tolerance_term(&yi, &yj, 1.5).map_err(|e| e.to_string())?;
    let tol_diff = (tol - 1.5f64.powf(-0.5)).abs();
    ensure(
        max_diff < 1e-12 && tol_diff < 1e-12,
        format!("contrastive vs oracle {max_diff:.1e} over 50 batches; tolerance term {tol:.12} (diff {tol_diff:.1e})"),
    )
}

fn reduction_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = LossConfig {
        theta: 1.0,
        ..LossConfig::default()
    };
    let mut max_diff: f64 = 0.0;
    for _ in 0..20 {
        let b = rng.random_range(1..=6);
        let mut shared = rand_labels(&mut rng, 6);
        shared.set(rng.random_range(0..6), true);
        let labels = vec![shared; b];
        let responses: Vec<Vec<Vec<f64>>> = (0..b).map(|_| rand_rows(&mut rng, 3, 4)).collect();
        let emb: Vec<Vec<f64>> = responses.iter().map(|r| sigma(r)).collect();
        let mut standard = 0.0;
        for i in 0..b {
            for j in 0..b {
                standard += 1.0 - emb[i].iter().zip(&emb[j]).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        standard /= (b * b) as f64;
        let adaptive = contrastive_via_tape(&responses, &labels, &cfg, true);
        let plain = contrastive_via_tape(&responses, &labels, &cfg, false);
        max_diff = max_diff
            .max((adaptive - standard).abs())
            .max((plain - standard).abs());
    }
    ensure(
        max_diff < 1e-12,
        format!("max difference {max_diff:.1e} < 1e-12"),
    )
}

/// Smallest within-cluster sum of squares over every split into two
/// non-empty groups.
fn best_two_partition(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let cost = |group: &[&Vec<f64>]| -> f64 {
        let d = group[0].len();
        let mean: Vec<f64> = (0..d)
            .map(|j| group.iter().map(|p| p[j]).sum::<f64>() / group.len() as f64)
            .collect();
        group
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    };
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        let (a, b): (Vec<_>, Vec<_>) = points
            .iter()
            .enumerate()
            .partition(|(i, _)| mask >> i & 1 == 1);
        let a: Vec<&Vec<f64>> = a.into_iter().map(|x| x.1).collect();
        let b: Vec<&Vec<f64>> = b.into_iter().map(|x| x.1).collect();
        best = best.min(cost(&a) + cost(&b));
    }
    best
}

fn prototype_init() -> Outcome {
    let mut shapes_ok = true;
    let mut mean_err: f64 = 0.0;
    let mut monotone = true;
    let mut cluster_means = 0;
    for (n, seed) in [(1usize, 1u64), (12, 2), (300, 3)] {
        let (samples, dims) = corpus(n, seed);
        for n_p in [1, 5, 20] {
            let cfg = RunConfig {
                prototypes_per_category: n_p,
                gamma: 1,
                ..RunConfig::default()
            };
            let extractor = GlobalExtractor::new(
                (dims.grid_height, dims.grid_width, dims.channels),
                dims.vocab_size,
                cfg.global_visual_dim,
                cfg.global_text_dim,
                seed,
            );
            let sets =
                build_class_feature_sets(&samples, 14, &extractor).map_err(|e| e.to_string())?;
            let init = init_prototype_matrix(&sets, n_p, cfg.proto_dim(), seed)
                .map_err(|e| e.to_string())?;
            shapes_ok &= init.matrix.shape() == [14, n_p, cfg.proto_dim()];
            for (k, clustering) in init.clusterings.iter().enumerate() {
                let Some(c) = clustering else { continue };
                monotone &= c.objective_history.windows(2).all(|w| w[1] <= w[0] + 1e-12);
                for i in 0..n_p {
                    if init.matrix.provenance(k, i) != Provenance::ClusterMean {
                        continue;
                    }
                    let members: Vec<&Vec<f64>> = sets.sets[k]
                        .iter()
                        .zip(&c.assignments)
                        .filter(|(_, &a)| a == i)
                        .map(|(m, _)| m)
                        .collect();
                    for (d, got) in init.matrix.get(k, i).iter().enumerate() {
                        let want = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                        mean_err = mean_err.max((got - want).abs());
                    }
                    cluster_means += 1;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut exhaustive_gap: f64 = 0.0;
    for trial in 0..30 {
        // Two well-separated blobs around (-3, -3) and (3, 3).
        let n = rng.random_range(2..=12);
        let split = rng.random_range(1..n);
        let points: Vec<Vec<f64>> = rand_rows(&mut rng, n, 2)
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let c = if i < split { -3.0 } else { 3.0 };
                p.iter().map(|x| c + 0.5 * x).collect()
            })
            .collect();
        let r = kmeans(&points, 2, trial, 100, 1e-6).map_err(|e| e.to_string())?;
        monotone &= r.objective_history.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        exhaustive_gap = exhaustive_gap.max(r.objective() - best_two_partition(&points));
    }
    ensure(
        shapes_ok && mean_err < 1e-9 && monotone && exhaustive_gap < 1e-9,
        format!(
            "shapes ok {shapes_ok}; {cluster_means} cluster means within {mean_err:.1e}; \
             objective non-increasing {monotone}; k=2 gap to exhaustive optimum {exhaustive_gap:.1e}"
        ),
    )
}

fn querying_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let (n_l, n_p) = (6, 4);
    let mut max_sum_err: f64 = 0.0;
    let mut violations = 0;
    let mut nearest_err: f64 = 0.0;
    for trial in 0..1000 {
        let normalizer = if trial % 2 == 0 {
            Normalizer::Softmax
        } else {
            Normalizer::LiteralLinear
        };
        let gamma = if trial % 5 == 0 {
            1
        } else {
            rng.random_range(1..=n_p)
        };
        let heads = [1, 2][trial % 2];
        let mut store = ParamStore::new();
        let pm = store.add("pm", rand_tensor(&mut rng, [n_l * n_p, 6]), 0);
        let net = ProtoNet::register(
            &mut store,
            ProtoNetDims {
                feature: 5,
                proto: 6,
                proto_proj: 4,
                query: 4,
                heads,
            },
            gamma,
            normalizer,
            0,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let mut mask = rand_labels(&mut rng, n_l);
        mask.set(rng.random_range(0..n_l), true);
        let candidates = select_category_prototypes(&mask, n_p).map_err(|e| e.to_string())?;
        let mut t = Tape::new();
        let v = store.bind(&mut t);
        let x = t.leaf(rand_tensor(&mut rng, [3, 5]));
        let bank = net.project_prototypes(&mut t, &v, v[pm.index()]).unwrap();
        let q = net
            .query_respond(
                &mut t,
                &v,
                &bank,
                x,
                &candidates,
                &mut SelectionLog::recording(),
            )
            .map_err(|e| e.to_string())?;
        for head in &q.heads {
            for (idx, w) in head.indices.iter().zip(&head.weights) {
                max_sum_err = max_sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
                violations += idx.iter().filter(|&&j| !mask.get(j / n_p)).count();
            }
        }
        if gamma == 1 {
            // Each head's response is exactly the transformed row of its
            // most similar candidate.
            let dh = 4 / heads;
            let resp = t.value(q.response).clone();
            let e = t.value(bank.transformed).clone();
            for (h, head) in q.heads.iter().enumerate() {
                for (row, idx) in head.indices.iter().enumerate() {
                    let sims = net.query(&mut t, &v, x, bank.projected).unwrap();
                    let s = t.value(sims[h]).row(row).to_vec();
                    let nearest = candidates
                        .iter()
                        .copied()
                        .max_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap().then(b.cmp(&a)))
                        .unwrap();
                    if idx != &vec![nearest] {
                        violations += 1;
                    }
                    for c in 0..dh {
                        let got = resp.at2(row, h * dh + c);
                        nearest_err = nearest_err.max((got - e.at2(nearest, h * dh + c)).abs());
                    }
                }
            }
        }
    }
    ensure(
        max_sum_err < 1e-9 && violations == 0 && nearest_err == 0.0,
        format!(
            "weight sums within {max_sum_err:.1e}; {violations} selections outside the mask or off the nearest; \
             γ=1 response deviation {nearest_err:.1e}"
        ),
    )
}

fn overfit_oracle() -> Outcome {
    let started = Instant::now();
    let (samples, dims) = corpus(1, 5);
    let cfg = RunConfig {
        epochs: 200,
        lr_decay: 1.0,
        lr_model: 5e-3,
        lr_prototype: 5e-3,
        batch_size: 1,
        model: ModelConfig {
            dropout: 0.0,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    let init = initial_prototypes(&cfg, dims, &samples).map_err(|e| e.to_string())?;
    let out = train(
        &cfg,
        dims,
        init.as_ref().map(|i| &i.matrix),
        &samples,
        &samples,
    )
    .map_err(|e| e.to_string())?;
    let first = out
        .history
        .iter()
        .find(|r| r.val_bleu_4 == Some(1.0))
        .map(|r| r.epoch);
    let score = evaluate(&out.model, &samples, cfg.beam_size, 1)
        .map_err(|e| e.to_string())?
        .metrics
        .bleu_4;
    let elapsed = started.elapsed().as_secs_f64();
    ensure(
        score == 1.0 && elapsed < 180.0,
        format!("BLEU-4 {score} (first exact at epoch {first:?}) in {elapsed:.1}s"),
    )
}

/// Test BLEU-4 of one configuration on the default corpus.
fn ablation_score(
    cfg: &RunConfig,
    splits: &xpronet::corpus::Splits,
    dims: ModelDims,
) -> Result<f64, String> {
    let init = initial_prototypes(cfg, dims, &splits.train).map_err(|e| e.to_string())?;
    let out = train(
        cfg,
        dims,
        init.as_ref().map(|i| &i.matrix),
        &splits.train,
        &splits.val,
    )
    .map_err(|e| e.to_string())?;
    Ok(evaluate(&out.model, &splits.test, cfg.beam_size, cfg.jobs)
        .map_err(|e| e.to_string())?
        .metrics
        .bleu_4)
}

fn directional_ablation() -> Outcome {
    let started = Instant::now();
    let spec = CorpusSpec::default();
    let vocab = build_vocabulary(&spec);
    let splits = split_corpus(
        generate_corpus(&spec).map_err(|e| e.to_string())?,
        spec.seed,
    );
    let dims = ModelDims::of(&splits.train[0], &vocab);
    let variants: [(&str, fn(&mut RunConfig)); 3] = [
        ("full", |_| {}),
        ("w/o PI", |c| c.disable_pi = true),
        ("w/o CMPNet", |c| c.disable_cmpnet = true),
    ];
    let mut means = Vec::new();
    for (name, apply) in variants {
        let mut scores = Vec::new();
        for seed in 1..=3 {
            let mut cfg = RunConfig {
                seed,
                ..RunConfig::default()
            };
            apply(&mut cfg);
            scores.push(ablation_score(&cfg, &splits, dims)?);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        means.push((name, mean, scores));
    }
    let elapsed = started.elapsed().as_secs_f64();
    let full = means[0].1;
    let detail = means
        .iter()
        .map(|(n, m, s)| format!("{n} {m:.4} {s:.4?}"))
        .collect::<Vec<_>>()
        .join("; ");
    ensure(
        full > means[1].1 && full > means[2].1 && elapsed < 1800.0,
        format!("mean test BLEU-4 {detail} in {elapsed:.0}s"),
    )
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn metric_oracles() -> Outcome {
    let b1 = bleu(&[(words("the the the"), words("the cat"))], 1);
    // LCS("the cat sat on mat", "the cat is on the mat") = 4 ("the cat on mat"):
    // P = 4/5, R = 4/6, F = (1+β²)PR / (R + β²P).
    let (p, r, beta) = (0.8, 4.0 / 6.0, 1.2f64);
    let hand = (1.0 + beta * beta) * p * r / (r + beta * beta * p);
    let rl = rouge_l_pair(
        &words("the cat sat on mat"),
        &words("the cat is on the mat"),
    );
    let same = vec![1usize, 7, 9, 12, 5, 8, 2];
    let ident = MetricsReport::compute(&[(same.clone(), same)]);
    let all_one = [
        ident.bleu_1,
        ident.bleu_2,
        ident.bleu_3,
        ident.bleu_4,
        ident.rouge_l,
    ]
    .iter()
    .all(|&v| v == 1.0);
    ensure(
        b1 == 1.0 / 3.0 && (rl - hand).abs() < 1e-4 && all_one,
        format!("BLEU-1 {b1} (want 1/3); ROUGE-L {rl:.6} (hand {hand:.6}); identical pair all 1: {all_one}"),
    )
}

fn determinism() -> Outcome {
    let (samples, dims) = corpus(120, 9);
    let splits = split_corpus(samples, 9);
    let cfg = RunConfig {
        epochs: 2,
        ..RunConfig::default()
    };
    let run = |jobs: usize| -> Result<String, String> {
        let cfg = RunConfig {
            jobs,
            ..cfg.clone()
        };
        let init = initial_prototypes(&cfg, dims, &splits.train).map_err(|e| e.to_string())?;
        let out = train(
            &cfg,
            dims,
            init.as_ref().map(|i| &i.matrix),
            &splits.train,
            &splits.val,
        )
        .map_err(|e| e.to_string())?;
        Ok(evaluate(&out.model, &splits.test, cfg.beam_size, cfg.jobs)
            .map_err(|e| e.to_string())?
            .metrics
            .to_json())
    };
    let a = run(1)?;
    let b = run(1)?;
    let c = run(2)?;
    ensure(
        a == b && a == c,
        format!(
            "repeat identical {}; identical with 2 jobs {}",
            a == b,
            a == c
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient_suite", gradient_suite),
        ("loss_oracles", loss_oracles),
        ("reduction_identity", reduction_identity),
        ("prototype_init", prototype_init),
        ("querying_invariants", querying_invariants),
        ("overfit_oracle", overfit_oracle),
        ("metric_oracles", metric_oracles),
        ("determinism", determinism),
        ("directional_ablation", directional_ablation),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
