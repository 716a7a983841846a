use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn xpronet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xpronet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = xpronet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    xpronet(args).status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_corpus(dir: &Path, num_samples: usize) -> String {
    let spec = dir.join("spec.json");
    fs::write(
        &spec,
        format!(r#"{{"num_samples": {num_samples}, "seed": 5}}"#),
    )
    .unwrap();
    let data = dir.join("data");
    ok(&[
        "gen-corpus",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    data.to_str().unwrap().to_string()
}

const TINY: &[&str] = &[
    "--set",
    "model.layers=1",
    "--set",
    "model.d_model=8",
    "--set",
    "model.d_ff=16",
    "--set",
    "prototypes_per_category=2",
    "--set",
    "query_dim=8",
    "--set",
    "proto_proj_dim=4",
    "--set",
    "global_visual_dim=4",
    "--set",
    "global_text_dim=4",
    "--set",
    "gamma=2",
    "--epochs",
    "1",
    "--beam-size",
    "1",
];

#[test]
fn gen_corpus_is_deterministic_with_70_10_20_splits() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = small_corpus(a.path(), 50);
    let db = small_corpus(b.path(), 50);
    let lines = |d: &str, f: &str| fs::read_to_string(Path::new(d).join(f)).unwrap();
    for (file, n) in [("train.jsonl", 35), ("val.jsonl", 5), ("test.jsonl", 10)] {
        assert_eq!(lines(&da, file).lines().count(), n, "{file}");
        assert_eq!(lines(&da, file), lines(&db, file), "{file}");
    }
    let manifest = json(&Path::new(&da).join("manifest.json"));
    assert_eq!(manifest["gen-corpus"]["sizes"]["train"], 35);
    assert_eq!(manifest["gen-corpus"]["seed"], 5);
}

#[test]
fn invalid_configuration_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    fs::write(&spec, r#"{"normal_probability": 2.0}"#).unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        code(&[
            "gen-corpus",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        2
    );
    assert_eq!(code(&["--set", "gamma=0", "--print-config"]), 2);
    assert_eq!(code(&["--set", "no_such_key=1", "--print-config"]), 2);
}

#[test]
fn print_config_reflects_overrides() {
    let text = ok(&[
        "--seed",
        "9",
        "--set",
        "model.heads=4",
        "--disable-pi",
        "--print-config",
    ]);
    let cfg: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["model"]["heads"], 4);
    assert_eq!(cfg["disable_pi"], true);
}

#[test]
fn empty_training_split_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path(), 20);
    fs::write(Path::new(&data).join("train.jsonl"), "").unwrap();
    let run = dir.path().join("run");
    assert_eq!(
        code(&[
            "--data-dir",
            &data,
            "--run-dir",
            run.to_str().unwrap(),
            "train"
        ]),
        3
    );
}

#[test]
fn train_eval_inspect_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path(), 30);
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let with = |rest: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = ["--data-dir", &data, "--run-dir", run_s]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend(TINY.iter().map(|s| s.to_string()));
        v.extend(rest.iter().map(|s| s.to_string()));
        v
    };
    let call = |rest: &[&str]| {
        let args = with(rest);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    call(&["train"]);
    for f in ["model.ckpt", "loss.csv", "history.json", "prototypes.pm"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(run.join("loss.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let report: Value = serde_json::from_str(&call(&["eval", "--split", "val"])).unwrap();
    for key in ["bleu_1", "bleu_4", "rouge_l"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} {v}");
    }
    assert!(run.join("metrics_val.json").exists());

    let manifest = json(&run.join("manifest.json"));
    let train = &manifest["train"];
    assert_eq!(train["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(train["variant"], "full");
    assert_eq!(train["config"]["epochs"], 1);
    assert!(manifest["eval-val"].is_object());

    let test_ids: Vec<String> = fs::read_to_string(Path::new(&data).join("test.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    let records = call(&["inspect", "--sample", &test_ids[0]]);
    let first: Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], test_ids[0].as_str());

    let generated = call(&["generate", "--split", "test"]);
    assert_eq!(generated.lines().count(), test_ids.len());
    let line: Value = serde_json::from_str(generated.lines().next().unwrap()).unwrap();
    assert_eq!(line["id"], test_ids[0].as_str());
    assert!(line["tokens"].is_array() && line["text"].is_string() && line["log_prob"].is_number());

    let csv = dir.path().join("pm.csv");
    call(&[
        "export-pm-csv",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    // 14 categories x 2 prototypes plus a header.
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 29);

    assert_eq!(
        code(
            &with(&["inspect", "--sample", "missing"])
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>()
        ),
        3
    );
}
