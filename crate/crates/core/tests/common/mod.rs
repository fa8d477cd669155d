//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use xfer_core::corpus::{pack_into_blocks, BlockSet, Corpus};
use xfer_core::model::{lm_cross_entropy, CausalLm, ModelConfig};
use xfer_tensor::gradcheck::{check, GradCheck};
use xfer_tensor::{ParamId, Result, Tape, Tensor, Var};

/// The example input file from the benchmark's documentation.
pub const EXAMPLE_JSONL: &str = "[3, 1, 4, 1, 5, 9, 2]
[6, 5, 3, 5, 8, 9, 7, 9, 3]
[2, 3, 8, 4]
[6, 2, 6, 4, 3, 3]
[8, 3, 2, 7, 9, 5, 0, 2, 8, 8, 4]
";

pub fn example_sequences() -> Vec<Vec<u32>> {
    vec![
        vec![3, 1, 4, 1, 5, 9, 2],
        vec![6, 5, 3, 5, 8, 9, 7, 9, 3],
        vec![2, 3, 8, 4],
        vec![6, 2, 6, 4, 3, 3],
        vec![8, 3, 2, 7, 9, 5, 0, 2, 8, 8, 4],
    ]
}

/// Stack-based matcher: every close `2w + 1` must match the innermost open
/// `2w`, and nothing may remain open.
pub fn brackets_balanced(seq: &[u32]) -> bool {
    let mut stack = Vec::new();
    for &t in seq {
        if t % 2 == 0 {
            stack.push(t / 2);
        } else if stack.pop() != Some(t / 2) {
            return false;
        }
    }
    stack.is_empty()
}

/// KL(empirical || reference) in nats; empty cells contribute nothing.
pub fn kl_divergence(counts: &[u64], reference: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    counts
        .iter()
        .zip(reference)
        .filter(|(c, _)| **c > 0)
        .map(|(c, q)| {
            let p = *c as f64 / n as f64;
            p * (p / q).ln()
        })
        .sum()
}

/// Pearson chi-square p-value of `counts` against a uniform expectation.
pub fn chi_square_uniform_p(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Mean with an error-free running sum (Neumaier), the reference for
/// ulp-level comparisons.
pub fn compensated_mean(xs: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    (sum + comp) / xs.len() as f64
}

pub fn ulps_apart(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, &out.shape());
    out.mul(tape.constant(w)).map(|v| v.sum())
}

type OpFn = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// Every differentiable op with input shapes.
pub fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |_, x| x[0].matmul(x[1])),
        ("matmul/shared", vec![vec![2, 3, 4], vec![4, 2]], |_, x| {
            x[0].matmul(x[1])
        }),
        ("matmul/batched", vec![vec![2, 3, 4], vec![2, 4, 3]], |_, x| {
            x[0].matmul(x[1])
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |_, x| x[0].add(x[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |_, x| x[0].sub(x[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |_, x| x[0].mul(x[1])),
        ("add_bcast", vec![vec![2, 3, 4], vec![3, 4]], |_, x| {
            x[0].add_bcast(x[1])
        }),
        ("mul_bcast", vec![vec![3, 4], vec![4]], |_, x| x[0].mul_bcast(x[1])),
        ("scale", vec![vec![5]], |_, x| Ok(x[0].scale(-1.7))),
        ("add_scalar", vec![vec![5]], |_, x| Ok(x[0].add_scalar(0.3))),
        ("sum", vec![vec![2, 2]], |_, x| Ok(x[0].sum())),
        ("mean", vec![vec![2, 2]], |_, x| Ok(x[0].mean())),
        ("reshape", vec![vec![2, 6]], |_, x| x[0].reshape(&[3, 4])),
        ("transpose", vec![vec![2, 3, 4, 2]], |_, x| x[0].transpose(1, 2)),
        ("transpose/outer", vec![vec![3, 2, 4]], |_, x| x[0].transpose(0, 2)),
        ("slice", vec![vec![3, 5]], |_, x| x[0].slice(1, 1, 4)),
        ("concat", vec![vec![2, 3], vec![2, 1]], |_, x| {
            Var::concat(&[x[0], x[1]], 1)
        }),
        ("concat/axis0", vec![vec![2, 3], vec![1, 3]], |_, x| {
            Var::concat(&[x[0], x[1]], 0)
        }),
        ("softmax/last", vec![vec![3, 5]], |_, x| x[0].softmax(1)),
        ("softmax/first", vec![vec![3, 5]], |_, x| x[0].softmax(0)),
        ("softmax/middle", vec![vec![2, 3, 4]], |_, x| x[0].softmax(1)),
        ("causal_mask", vec![vec![2, 4, 4]], |_, x| {
            x[0].causal_mask()?.softmax(2)
        }),
        ("layer_norm", vec![vec![3, 6]], |_, x| x[0].layer_norm(1e-5)),
        ("gelu", vec![vec![4, 4]], |_, x| Ok(x[0].gelu())),
        ("embedding", vec![vec![5, 3]], |_, x| x[0].embedding(&[4, 0, 4, 2])),
        ("dropout", vec![vec![4, 8]], |_, x| x[0].dropout(0.3, 99)),
        ("cross_entropy", vec![vec![4, 6]], |_, x| {
            x[0].cross_entropy(&[0, 5, 2, 2])
        }),
        ("attention", vec![vec![2, 4, 3]; 3], |_, x| {
            let scores = x[0].matmul(x[1].transpose(1, 2)?)?.scale(0.5);
            scores.causal_mask()?.softmax(2)?.matmul(x[2])
        }),
    ]
}

pub fn op_gradcheck(shapes: &[Vec<usize>], op: OpFn, seeds: u64) -> GradCheck {
    let mut total = GradCheck::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let report = check(&inputs, 1e-4, |tape, xs| project(tape, op(tape, xs)?, seed)).unwrap();
        total = total.merge(report);
    }
    total
}

pub struct ModelCheck {
    pub report: GradCheck,
    /// Largest analytic gradient on the attention key biases, which cannot
    /// affect the loss and must be zero.
    pub key_bias_grad: f64,
}

/// Central differences (h = 1e-4, f64, dropout off) on `samples` randomly
/// chosen scalar parameters of the desk model against one reverse sweep.
pub fn sentence_blocks() -> (BlockSet, usize) {
    let sentence: Vec<u32> = vec![4, 11, 2, 17, 9, 9, 3, 14, 0, 6, 12, 5];
    let corpus = Corpus::from_vecs(vec![sentence; 400]).unwrap();
    let vocab = corpus.vocab_size();
    (pack_into_blocks(&corpus, 64, vocab as u32).unwrap(), vocab + 1)
}

pub fn full_model_gradcheck(seed: u64, samples: usize) -> ModelCheck {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::desk(512)
    };
    let mut model = CausalLm::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let row: Vec<u32> = (0..12).map(|_| rng.random_range(0..512)).collect();

    let tape = Tape::new();
    let loss = model.loss(&tape, &row, 1, None).unwrap();
    tape.backward(loss, &mut model.params).unwrap();
    let grads: Vec<Vec<f64>> = model.params.iter().map(|p| p.grad.clone().unwrap()).collect();

    // Softmax ignores a constant added across a row of attention scores,
    // so the key bias has an exactly-zero gradient and no meaningful
    // relative error; it is checked for zero instead of sampled.
    let is_key_bias = |i: usize| model.params.get(ParamId(i)).name.ends_with("attn.bk");
    let key_bias_grad = (0..grads.len())
        .filter(|&i| is_key_bias(i))
        .flat_map(|i| grads[i].iter().map(|g| g.abs()))
        .fold(0.0, f64::max);
    let pool: Vec<usize> = (0..grads.len()).filter(|&i| !is_key_bias(i)).collect();

    let eval = |m: &CausalLm<f64>| lm_cross_entropy(&m.logits(&row).unwrap(), &row).unwrap();
    let h = 1e-4;
    let mut report = GradCheck::default();
    for _ in 0..samples {
        let pi = pool[rng.random_range(0..pool.len())];
        let id = ParamId(pi);
        let ei = rng.random_range(0..model.params.get(id).value.numel());
        let x0 = model.params.get(id).value.data()[ei];
        model.params.get_mut(id).value.data_mut()[ei] = x0 + h;
        let up = eval(&model);
        model.params.get_mut(id).value.data_mut()[ei] = x0 - h;
        let down = eval(&model);
        model.params.get_mut(id).value.data_mut()[ei] = x0;
        report.record(grads[pi][ei], (up - down) / (2.0 * h));
    }
    ModelCheck { report, key_bias_grad }
}
