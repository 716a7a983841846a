use std::io::Write;

use xpronet::corpus::{
    build_vocabulary, generate_corpus, load_dataset, save_dataset, split_corpus, CorpusSpec,
    Labeler,
};
use xpronet::Error;

#[test]
fn all_normal_fraction_is_near_the_spec() {
    let spec = CorpusSpec::default();
    let samples = generate_corpus(&spec).unwrap();
    let normal =
        samples.iter().filter(|s| s.labels.is_all_zero()).count() as f64 / samples.len() as f64;
    assert!((normal - 0.6).abs() <= 0.05, "{normal}");
}

#[test]
fn labeler_recovers_every_stored_label() {
    let spec = CorpusSpec::default();
    let vocab = build_vocabulary(&spec);
    let labeler = Labeler::new(&spec, &vocab);
    for s in generate_corpus(&spec).unwrap() {
        assert_eq!(labeler.label_report(&s.report), s.labels, "{}", s.id);
    }
}

#[test]
fn dataset_round_trip_and_errors() {
    let spec = CorpusSpec {
        num_samples: 40,
        ..CorpusSpec::default()
    };
    let vocab = build_vocabulary(&spec);
    let samples = generate_corpus(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_dataset(&samples, &vocab, &path).unwrap();
    assert_eq!(load_dataset(&path, &vocab).unwrap(), samples);

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert!(load_dataset(&empty, &vocab).unwrap().is_empty());

    let text = std::fs::read_to_string(&path).unwrap();
    let truncated = dir.path().join("cut.jsonl");
    let mut f = std::fs::File::create(&truncated).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    writeln!(
        f,
        "{}\n{}\n{}",
        lines[0],
        lines[1],
        &lines[2][..lines[2].len() / 2]
    )
    .unwrap();
    match load_dataset(&truncated, &vocab) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn splits_partition_the_corpus() {
    let samples = generate_corpus(&CorpusSpec::default()).unwrap();
    let splits = split_corpus(samples.clone(), 7);
    assert_eq!(
        (splits.train.len(), splits.val.len(), splits.test.len()),
        (700, 100, 200)
    );
    let mut ids: Vec<_> = splits
        .train
        .iter()
        .chain(&splits.val)
        .chain(&splits.test)
        .map(|s| s.id.clone())
        .collect();
    ids.sort();
    let mut want: Vec<_> = samples.iter().map(|s| s.id.clone()).collect();
    want.sort();
    assert_eq!(ids, want);
    assert_eq!(split_corpus(samples, 7), splits);
}

#[test]
fn invalid_spec_lists_offending_keys() {
    let spec = CorpusSpec {
        normal_probability: 1.5,
        noise_std: -1.0,
        ..CorpusSpec::default()
    };
    let err = generate_corpus(&spec).unwrap_err().to_string();
    assert!(
        err.contains("normal_probability") && err.contains("noise_std"),
        "{err}"
    );
}
