use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use xpronet::config::RunConfig;
use xpronet::corpus::{
    build_vocabulary, generate_corpus, load_dataset, save_dataset, split_corpus, CorpusSpec,
    Sample, Vocabulary,
};
use xpronet::model::{ModelDims, Xpronet};
use xpronet::proto_init::{PrototypeMatrix, Provenance};
use xpronet::train::{evaluate, generate_reports, initial_prototypes, train, write_loss_csv};
use xpronet::Error;

#[derive(Parser)]
#[command(
    name = "xpronet",
    version,
    about = "Prototype-driven report generation on a synthetic corpus"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    /// Print the resolved configuration as JSON.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

/// Configuration sources, applied in order: defaults, `--config`, `--set`,
/// then the dedicated flags.
#[derive(Args, Default)]
struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set loss.theta=1.75`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    beam_size: Option<usize>,
    /// Worker threads for evaluation and generation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    disable_pi: bool,
    #[arg(long, global = true)]
    disable_imlcs: bool,
    #[arg(long, global = true)]
    disable_cmpnet: bool,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    prototypes: Option<PathBuf>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus and write the train/val/test splits.
    GenCorpus {
        /// Corpus specification (JSON); the built-in one when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize the prototype matrix from the training split.
    InitPm {
        /// Defaults to `paths.prototypes`, else `<run_dir>/prototypes.pm`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and keep the checkpoint with the best validation BLEU-4.
    Train,
    /// Score generated reports for a split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Write generated reports for a split as JSON lines.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the prototypes selected for one sample's patches and words.
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a prototype matrix as CSV, from a checkpoint or a matrix file.
    ExportPmCsv {
        #[arg(long, conflicts_with = "pm")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pm: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn file(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }

    fn name(self) -> &'static str {
        self.file().trim_end_matches(".jsonl")
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("`{key}`: not an object")))?
            .entry(part.to_string())
            .or_insert_with(|| json!({}));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::config(format!("`{key}`: not an object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Overrides {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut doc = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            }
            None => json!({}),
        };
        for item in &self.set {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("`--set {item}`: expected KEY=VALUE")))?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        let flags = [
            ("seed", self.seed.map(Value::from)),
            ("epochs", self.epochs.map(Value::from)),
            ("beam_size", self.beam_size.map(Value::from)),
            ("jobs", self.jobs.map(Value::from)),
            ("disable_pi", self.disable_pi.then_some(Value::Bool(true))),
            (
                "disable_imlcs",
                self.disable_imlcs.then_some(Value::Bool(true)),
            ),
            (
                "disable_cmpnet",
                self.disable_cmpnet.then_some(Value::Bool(true)),
            ),
            ("paths.data_dir", self.data_dir.as_ref().map(|p| json!(p))),
            (
                "paths.prototypes",
                self.prototypes.as_ref().map(|p| json!(p)),
            ),
            ("paths.run_dir", self.run_dir.as_ref().map(|p| json!(p))),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                set_path(&mut doc, key, v)?;
            }
        }
        Ok(RunConfig::from_json(&doc.to_string())?)
    }
}

fn config_hash(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_json().as_bytes()))
}

/// Records `entry` under `command` in `<dir>/manifest.json`.
fn update_manifest(dir: &Path, command: &str, entry: Value) -> anyhow::Result<()> {
    let path = dir.join("manifest.json");
    let mut manifest = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_else(|_| json!({})),
        Err(_) => json!({}),
    };
    if !manifest.is_object() {
        manifest = json!({});
    }
    manifest["version"] = json!(env!("CARGO_PKG_VERSION"));
    manifest[command] = entry;
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn run_entry(cfg: &RunConfig, artifacts: &[&Path]) -> Value {
    json!({
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "variant": cfg.variant_name(),
        "ablation": {
            "disable_pi": cfg.disable_pi,
            "disable_imlcs": cfg.disable_imlcs,
            "disable_cmpnet": cfg.disable_cmpnet,
        },
        "config": cfg,
        "artifacts": artifacts,
    })
}

fn data_dir(cfg: &RunConfig) -> anyhow::Result<&Path> {
    cfg.paths
        .data_dir
        .as_deref()
        .ok_or_else(|| Error::config("paths.data_dir is not set (use --data-dir)").into())
}

fn run_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg
        .paths
        .run_dir
        .clone()
        .ok_or_else(|| Error::config("paths.run_dir is not set (use --run-dir)"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_vocab(cfg: &RunConfig) -> anyhow::Result<Vocabulary> {
    Ok(Vocabulary::load(&data_dir(cfg)?.join("vocab.json"))?)
}

fn load_split(cfg: &RunConfig, vocab: &Vocabulary, split: Split) -> anyhow::Result<Vec<Sample>> {
    Ok(load_dataset(&data_dir(cfg)?.join(split.file()), vocab)?)
}

fn checkpoint_path(cfg: &RunConfig, given: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    match given {
        Some(p) => Ok(p),
        None => Ok(cfg
            .paths
            .run_dir
            .as_ref()
            .ok_or_else(|| Error::config("no --checkpoint and paths.run_dir is not set"))?
            .join("model.ckpt")),
    }
}

/// Loads a checkpoint and applies the runtime settings of `cfg` to it.
fn load_model(cfg: &RunConfig, path: &Path) -> anyhow::Result<Xpronet> {
    let mut model = Xpronet::load(path)?;
    model.cfg.jobs = cfg.jobs;
    model.cfg.beam_size = cfg.beam_size;
    model.cfg.inference_label_mode = cfg.inference_label_mode;
    Ok(model)
}

fn gen_corpus(spec: Option<PathBuf>, out: &Path) -> anyhow::Result<()> {
    let spec = match spec {
        Some(path) => {
            let text =
                fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            CorpusSpec::from_json(&text)?
        }
        None => CorpusSpec::default(),
    };
    spec.validate()?;
    let vocab = build_vocabulary(&spec);
    let splits = split_corpus(generate_corpus(&spec)?, spec.seed);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    vocab.save(&out.join("vocab.json"))?;
    fs::write(
        out.join("spec.json"),
        serde_json::to_string_pretty(&spec)? + "\n",
    )?;
    for (split, samples) in [
        (Split::Train, &splits.train),
        (Split::Val, &splits.val),
        (Split::Test, &splits.test),
    ] {
        save_dataset(samples, &vocab, &out.join(split.file()))?;
    }
    let spec_json = serde_json::to_string(&spec)?;
    update_manifest(
        out,
        "gen-corpus",
        json!({
            "spec_hash": hex::encode(Sha256::digest(spec_json.as_bytes())),
            "seed": spec.seed,
            "sizes": { "train": splits.train.len(), "val": splits.val.len(), "test": splits.test.len() },
        }),
    )?;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        splits.train.len() + splits.val.len() + splits.test.len(),
        out.display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn init_pm(cfg: &RunConfig, out: Option<PathBuf>) -> anyhow::Result<()> {
    if cfg.disable_cmpnet {
        bail!(Error::config(
            "disable_cmpnet is set: there is no prototype matrix to initialize"
        ));
    }
    let out = match out.or_else(|| cfg.paths.prototypes.clone()) {
        Some(p) => p,
        None => run_dir(cfg)?.join("prototypes.pm"),
    };
    let vocab = load_vocab(cfg)?;
    let train = load_split(cfg, &vocab, Split::Train)?;
    let first = train
        .first()
        .ok_or_else(|| Error::data("training split is empty"))?;
    let init = initial_prototypes(cfg, ModelDims::of(first, &vocab), &train)?
        .expect("prototype pipeline enabled");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    init.matrix.save(&out)?;
    let fraction = init.matrix.cluster_mean_fraction();
    let manifest_dir = out
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut entry = run_entry(cfg, &[&out]);
    entry["cluster_mean_fraction"] = json!(fraction);
    update_manifest(manifest_dir, "init-pm", entry)?;
    println!(
        "wrote {:?} prototype matrix to {} ({:.1}% cluster means)",
        init.matrix.shape(),
        out.display(),
        100.0 * fraction
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = run_dir(cfg)?;
    let vocab = load_vocab(cfg)?;
    let train_set = load_split(cfg, &vocab, Split::Train)?;
    let val = load_split(cfg, &vocab, Split::Val)?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::data("training split is empty"))?;
    let dims = ModelDims::of(first, &vocab);
    let pm = if cfg.disable_cmpnet {
        None
    } else {
        match &cfg.paths.prototypes {
            Some(path) => Some(PrototypeMatrix::load(path)?),
            None => {
                let init =
                    initial_prototypes(cfg, dims, &train_set)?.expect("prototype pipeline enabled");
                init.matrix.save(&dir.join("prototypes.pm"))?;
                Some(init.matrix)
            }
        }
    };
    let outcome = train(cfg, dims, pm.as_ref(), &train_set, &val)?;
    let ckpt = dir.join("model.ckpt");
    let csv = dir.join("loss.csv");
    let history = dir.join("history.json");
    outcome.model.save(&ckpt)?;
    write_loss_csv(&csv, &outcome.history)?;
    fs::write(
        &history,
        serde_json::to_string_pretty(&outcome.history)? + "\n",
    )?;
    let mut entry = run_entry(cfg, &[&ckpt, &csv, &history]);
    entry["best_epoch"] = json!(outcome.best_epoch);
    update_manifest(&dir, "train", entry)?;
    println!(
        "trained {} for {} epochs; best validation BLEU-4 at epoch {}; checkpoint {}",
        cfg.variant_name(),
        outcome.history.len(),
        outcome.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, checkpoint: Option<PathBuf>, split: Split) -> anyhow::Result<()> {
    let model = load_model(cfg, &checkpoint_path(cfg, checkpoint)?)?;
    let vocab = load_vocab(cfg)?;
    let samples = load_split(cfg, &vocab, split)?;
    let eval = evaluate(&model, &samples, model.cfg.beam_size, model.cfg.jobs)?;
    let report = eval.metrics.to_json();
    if let Some(dir) = &cfg.paths.run_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("metrics_{}.json", split.name()));
        fs::write(&path, report.clone() + "\n")?;
        update_manifest(
            dir,
            &format!("eval-{}", split.name()),
            run_entry(&model.cfg, &[&path]),
        )?;
    }
    println!("{report}");
    Ok(())
}

fn generate_cmd(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    split: Split,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let model = load_model(cfg, &checkpoint_path(cfg, checkpoint)?)?;
    let vocab = load_vocab(cfg)?;
    let samples = load_split(cfg, &vocab, split)?;
    let hyps = generate_reports(&model, &samples, model.cfg.beam_size, model.cfg.jobs)?;
    let mut lines = String::new();
    for (s, h) in samples.iter().zip(&hyps) {
        let record = json!({
            "id": s.id,
            "tokens": h.tokens.iter().map(|&t| vocab.token(t)).collect::<Result<Vec<_>, _>>()?,
            "text": vocab.decode(&h.tokens),
            "log_prob": h.log_prob,
            "reference": vocab.decode(&s.report),
        });
        lines.push_str(&record.to_string());
        lines.push('\n');
    }
    match out {
        Some(path) => {
            fs::write(&path, lines).with_context(|| format!("writing {}", path.display()))?
        }
        None => std::io::stdout().write_all(lines.as_bytes())?,
    }
    Ok(())
}

fn inspect_cmd(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    sample_id: &str,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let model = load_model(cfg, &checkpoint_path(cfg, checkpoint)?)?;
    let vocab = load_vocab(cfg)?;
    let mut found = None;
    for split in [Split::Test, Split::Val, Split::Train] {
        let samples = load_split(cfg, &vocab, split)?;
        if let Some(s) = samples.into_iter().find(|s| s.id == sample_id) {
            found = Some(s);
            break;
        }
    }
    let sample = found.ok_or_else(|| Error::data(format!("no sample with id {sample_id}")))?;
    let inspection = model.inspect(&sample, model.cfg.beam_size)?;
    let records = inspection.records(&sample.id, &vocab, model.cfg.prototypes_per_category)?;
    let mut lines = String::new();
    for r in records {
        lines.push_str(&r.to_string());
        lines.push('\n');
    }
    match out {
        Some(path) => {
            fs::write(&path, lines).with_context(|| format!("writing {}", path.display()))?
        }
        None => std::io::stdout().write_all(lines.as_bytes())?,
    }
    Ok(())
}

fn export_pm_csv(
    checkpoint: Option<PathBuf>,
    pm: Option<PathBuf>,
    out: &Path,
) -> anyhow::Result<()> {
    let matrix = match (checkpoint, pm) {
        (Some(ckpt), _) => Xpronet::load(&ckpt)?.prototype_matrix().ok_or_else(|| {
            Error::config("checkpoint was trained without the prototype pipeline")
        })?,
        (None, Some(path)) => PrototypeMatrix::load(&path)?,
        (None, None) => bail!(Error::config("export-pm-csv needs --checkpoint or --pm")),
    };
    matrix.write_csv(out)?;
    let loaded = matrix.provenance(0, 0) == Provenance::Loaded;
    println!(
        "wrote {:?} prototype matrix to {}{}",
        matrix.shape(),
        out.display(),
        if loaded { " (trained values)" } else { "" }
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.overrides.resolve()?;
    if cli.print_config {
        println!("{}", cfg.to_json());
    }
    match cli.command {
        None if cli.print_config => Ok(()),
        None => Err(anyhow!(Error::config("no command given (see --help)"))),
        Some(Command::GenCorpus { spec, out }) => gen_corpus(spec, &out),
        Some(Command::InitPm { out }) => init_pm(&cfg, out),
        Some(Command::Train) => train_cmd(&cfg),
        Some(Command::Eval { checkpoint, split }) => eval_cmd(&cfg, checkpoint, split),
        Some(Command::Generate {
            checkpoint,
            split,
            out,
        }) => generate_cmd(&cfg, checkpoint, split, out),
        Some(Command::Inspect {
            checkpoint,
            sample,
            out,
        }) => inspect_cmd(&cfg, checkpoint, &sample, out),
        Some(Command::ExportPmCsv {
            checkpoint,
            pm,
            out,
        }) => export_pm_csv(checkpoint, pm, &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Divergence(_) | Error::NonFinite { .. }) => 4,
        Some(
            Error::Data(_)
            | Error::Parse { .. }
            | Error::Vocab { .. }
            | Error::Io(_)
            | Error::Json(_),
        ) => 3,
        Some(Error::Contract(_) | Error::Tensor(_)) => 1,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
