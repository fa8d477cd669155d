use proptest::prelude::*;
use xfer_core::tokenizer::{tokenize_target, train_bpe};

const SAMPLE: &str = include_str!("data/natural_text_1mb.txt");

#[test]
fn natural_text_compresses_below_one_token_per_byte() {
    let model = train_bpe(SAMPLE, 256 + 1000 + 1).unwrap();
    assert_eq!(model.merges().len(), 1000);
    let (_, corpus) = tokenize_target(SAMPLE, 256 + 1000 + 1).unwrap();
    let bytes: usize = SAMPLE.lines().map(str::len).sum();
    let ratio = corpus.total_tokens() as f64 / bytes as f64;
    assert!(ratio < 1.0, "tokens per byte {ratio}");
}

#[test]
fn training_is_deterministic() {
    let text = &SAMPLE[..50_000];
    assert_eq!(train_bpe(text, 600).unwrap(), train_bpe(text, 600).unwrap());
}

#[test]
fn smaller_vocab_yields_a_merge_prefix() {
    let text = &SAMPLE[..50_000];
    let big = train_bpe(text, 700).unwrap();
    let small = train_bpe(text, 400).unwrap();
    assert_eq!(small.merges(), &big.merges()[..small.merges().len()]);
}

proptest! {
    #[test]
    fn decode_inverts_encode(train in "\\PC{1,200}", probe in any::<String>()) {
        let model = train_bpe(&train, 300).unwrap();
        prop_assert_eq!(model.decode(&model.encode(&probe)).unwrap(), probe);
    }

    #[test]
    fn more_merges_never_lengthen(text in "[ab c\\n]{1,300}", n in 0usize..40) {
        let model = train_bpe(&text, 300).unwrap();
        let mut prev = usize::MAX;
        for k in 0..=model.merges().len().min(n) {
            let len = model.truncated(k).encode(&text).len();
            prop_assert!(len <= prev);
            prev = len;
        }
    }
}
