use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xpro_tensor::{ParamStore, Tape, Tensor};
use xpronet::seq_model::{Dropout, ModelConfig, Seq2Seq};

const VOCAB: usize = 9;

fn model(encoder_positions: bool, seed: u64) -> (ParamStore, Seq2Seq) {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        max_len: 12,
        dropout: 0.0,
        encoder_positions,
    };
    let mut store = ParamStore::new();
    let seq = Seq2Seq::register(
        &mut store,
        &cfg,
        VOCAB,
        0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    (store, seq)
}

fn source(seed: u64, rows: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    (0..rows)
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn logits(store: &ParamStore, seq: &Seq2Seq, src: &[Vec<f64>], tokens: &[usize]) -> Tensor {
    let mut t = Tape::new();
    let v = store.bind(&mut t);
    let s = t.leaf(Tensor::from_rows(src).unwrap());
    let memory = seq.encode(&mut t, &v, s, &mut Dropout::eval()).unwrap();
    let target = seq.embed_report(&mut t, &v, tokens).unwrap();
    let out = seq
        .decode(&mut t, &v, memory, target, &mut Dropout::eval(), None)
        .unwrap();
    t.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn later_tokens_never_change_earlier_logits(
        seed in 0u64..100,
        prefix in prop::collection::vec(1usize..VOCAB, 1..6),
        tail_a in prop::collection::vec(1usize..VOCAB, 1..4),
        tail_b in prop::collection::vec(1usize..VOCAB, 1..4),
    ) {
        let (store, seq) = model(true, seed);
        let src = source(seed, 5);
        let a = logits(&store, &seq, &src, &[prefix.clone(), tail_a].concat());
        let b = logits(&store, &seq, &src, &[prefix.clone(), tail_b].concat());
        for i in 0..prefix.len() {
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn without_positions_the_source_is_a_set(seed in 0u64..100, rotate in 1usize..5) {
        let (store, seq) = model(false, seed);
        let src = source(seed, 5);
        let mut shuffled = src.clone();
        shuffled.rotate_left(rotate);
        let tokens = [1, 4, 6, 3];
        let a = logits(&store, &seq, &src, &tokens);
        let b = logits(&store, &seq, &shuffled, &tokens);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn encoder_positions_break_the_symmetry() {
    let (store, seq) = model(true, 3);
    let src = source(3, 5);
    let mut shuffled = src.clone();
    shuffled.rotate_left(2);
    let a = logits(&store, &seq, &src, &[1, 4]);
    let b = logits(&store, &seq, &shuffled, &[1, 4]);
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn prefixes_longer_than_max_len_are_rejected() {
    let (store, seq) = model(true, 1);
    let mut t = Tape::new();
    let v = store.bind(&mut t);
    let s = t.leaf(Tensor::from_rows(&source(1, 3)).unwrap());
    let memory = seq.encode(&mut t, &v, s, &mut Dropout::eval()).unwrap();
    let target = t.leaf(Tensor::zeros([13, 8]));
    assert!(seq
        .decode(&mut t, &v, memory, target, &mut Dropout::eval(), None)
        .is_err());
}
