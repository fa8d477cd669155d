mod common;

use common::sentence_blocks;
use xfer_core::corpus::{fit_to_token_budget, pack_into_blocks, BlockSet, Corpus};
use xfer_core::model::{lm_cross_entropy, CausalLm, ModelConfig};
use xfer_core::synthgen::{gen_paren_corpus, gen_random_corpus, zm_dist, ParenSpec, ZipfMandelbrotParams};
use xfer_core::trainer::{evaluate, train, TrainConfig};

#[test]
fn memorizes_a_repeated_sentence_within_200_steps() {
    let (blocks, vocab) = sentence_blocks();
    let mut model = CausalLm::<f32>::init(ModelConfig::desk(vocab), 0).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 8,
        epochs: 200 / (blocks.len() / 8),
        ..TrainConfig::pretrain()
    };
    let trace = train(&mut model, &blocks, &cfg).unwrap();
    assert!(trace.len() <= 200);
    let ce = evaluate(&model, &blocks).unwrap();
    eprintln!("steps {} final ce {ce}", trace.len());
    assert!(ce < 0.1, "{ce}");
}

#[test]
fn untrained_model_scores_near_ln_vocab_on_uniform_data() {
    let data = gen_random_corpus(511, 20_000, 100, 3).unwrap();
    let blocks = pack_into_blocks(&data, 64, 511).unwrap();
    let model = CausalLm::<f32>::init(ModelConfig::desk(512), 0).unwrap();
    let ce = evaluate(&model, &blocks).unwrap();
    let ln_v = 512f64.ln();
    assert!((ce - ln_v).abs() / ln_v < 0.02, "{ce}");
}

#[test]
fn evaluate_is_pure_and_deterministic() {
    let (blocks, vocab) = sentence_blocks();
    let model = CausalLm::<f32>::init(ModelConfig::desk(vocab), 1).unwrap();
    let before = model.params.clone();
    let a = evaluate(&model, &blocks).unwrap();
    let b = evaluate(&model, &blocks).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(model.params, before);
}

#[test]
fn single_block_matches_lm_cross_entropy() {
    let (blocks, vocab) = sentence_blocks();
    let one = pack_into_blocks(
        &Corpus::from_vecs(vec![blocks.block(0)[..63].to_vec()]).unwrap(),
        64,
        63,
    )
    .unwrap();
    let model = CausalLm::<f32>::init(ModelConfig::desk(vocab.max(64)), 2).unwrap();
    let row = one.block(0);
    let direct = lm_cross_entropy(&model.logits(row).unwrap(), row).unwrap();
    assert_eq!(evaluate(&model, &one).unwrap().to_bits(), direct.to_bits());
}

fn paren_blocks(seed: u64) -> (BlockSet, usize) {
    let spec = ParenSpec::new(zm_dist(&ZipfMandelbrotParams::new(50)).unwrap());
    let corpus = gen_paren_corpus(&spec, 40_000, seed).unwrap();
    let v = corpus.vocab_size();
    (pack_into_blocks(&corpus, 64, v as u32).unwrap(), v + 1)
}

#[test]
fn training_is_deterministic() {
    let (blocks, vocab) = paren_blocks(0);
    let cfg = TrainConfig {
        epochs: 1,
        lr: 1e-3,
        ..TrainConfig::pretrain()
    };
    let mut a = CausalLm::<f32>::init(ModelConfig::desk(vocab), 5).unwrap();
    let mut b = CausalLm::<f32>::init(ModelConfig::desk(vocab), 5).unwrap();
    let ta = train(&mut a, &blocks, &cfg).unwrap();
    let tb = train(&mut b, &blocks, &cfg).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(a.params, b.params);
}

/// The 50-step moving average never climbs more than 10% above its
/// running minimum.
#[test]
fn loss_does_not_diverge_on_structured_data() {
    for seed in 0..3 {
        let (blocks, vocab) = paren_blocks(seed);
        let cfg = TrainConfig {
            epochs: 8,
            lr: 1e-3,
            seed,
            ..TrainConfig::pretrain()
        };
        let mut model = CausalLm::<f32>::init(ModelConfig::desk(vocab), seed).unwrap();
        let trace = train(&mut model, &blocks, &cfg).unwrap();
        let losses: Vec<f64> = trace.iter().map(|s| s.loss).collect();
        let smooth: Vec<f64> = losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
        let mut best = f64::INFINITY;
        for s in smooth {
            best = best.min(s);
            assert!(s <= best * 1.1, "seed {seed}: {s} vs {best}");
        }
        assert!(trace.last().unwrap().loss < trace[0].loss);
    }
}

#[test]
fn empty_and_zero_epoch_inputs_rejected() {
    let (blocks, vocab) = sentence_blocks();
    let mut model = CausalLm::<f32>::init(ModelConfig::desk(vocab), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::tune()
    };
    assert!(train(&mut model, &blocks, &cfg).is_err());
    let tiny = Corpus::from_vecs(vec![vec![1]]).unwrap();
    let empty = pack_into_blocks(&fit_to_token_budget(&tiny, 1, None).unwrap(), 64, 2).unwrap();
    assert!(train(&mut model, &empty, &TrainConfig::tune()).is_err());
    assert!(evaluate(&model, &empty).is_err());
}
