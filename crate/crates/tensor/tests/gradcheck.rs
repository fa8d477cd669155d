//! Analytic gradients of every op against central finite differences in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xfer_tensor::gradcheck::{check, GradCheck};
use xfer_tensor::{Result, Tape, Tensor, Var};

const H: f64 = 1e-4;
const TOL: f64 = 1e-5;
const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces an op's output to a scalar through a fixed random projection so
/// every output element carries a distinct upstream gradient.
fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, &out.shape());
    out.mul(tape.constant(w)).map(|v| v.sum())
}

fn run<F>(name: &str, shapes: &[&[usize]], op: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + Copy,
{
    let mut total = GradCheck::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let report = check(&inputs, H, |tape, xs| project(tape, op(tape, xs)?, seed)).unwrap();
        total = total.merge(report);
    }
    assert!(
        total.max_rel_err < TOL,
        "{name}: max relative error {:.3e} over {} elements",
        total.max_rel_err,
        total.checked
    );
}

#[test]
fn matmul_2d() {
    run("matmul", &[&[3, 4], &[4, 5]], |_, x| x[0].matmul(x[1]));
}

#[test]
fn matmul_shared_rhs() {
    run("matmul/shared", &[&[2, 3, 4], &[4, 2]], |_, x| x[0].matmul(x[1]));
}

#[test]
fn matmul_batched() {
    run("matmul/batched", &[&[2, 3, 4], &[2, 4, 3]], |_, x| x[0].matmul(x[1]));
}

#[test]
fn elementwise() {
    run("add", &[&[2, 3], &[2, 3]], |_, x| x[0].add(x[1]));
    run("sub", &[&[2, 3], &[2, 3]], |_, x| x[0].sub(x[1]));
    run("mul", &[&[2, 3], &[2, 3]], |_, x| x[0].mul(x[1]));
    run("add_bcast", &[&[2, 3, 4], &[3, 4]], |_, x| x[0].add_bcast(x[1]));
    run("mul_bcast", &[&[3, 4], &[4]], |_, x| x[0].mul_bcast(x[1]));
}

#[test]
fn scalar_ops() {
    run("scale", &[&[5]], |_, x| Ok(x[0].scale(-1.7)));
    run("add_scalar", &[&[5]], |_, x| Ok(x[0].add_scalar(0.3)));
    run("sum", &[&[2, 2]], |_, x| Ok(x[0].sum()));
    run("mean", &[&[2, 2]], |_, x| Ok(x[0].mean()));
}

#[test]
fn shape_ops() {
    run("reshape", &[&[2, 6]], |_, x| x[0].reshape(&[3, 4]));
    run("transpose", &[&[2, 3, 4, 2]], |_, x| x[0].transpose(1, 2));
    run("transpose/outer", &[&[3, 2, 4]], |_, x| x[0].transpose(0, 2));
    run("slice", &[&[3, 5]], |_, x| x[0].slice(1, 1, 4));
    run("concat", &[&[2, 3], &[2, 1]], |_, x| Var::concat(&[x[0], x[1]], 1));
    run("concat/axis0", &[&[2, 3], &[1, 3]], |_, x| {
        Var::concat(&[x[0], x[1]], 0)
    });
}

#[test]
fn softmax_each_axis() {
    run("softmax/last", &[&[3, 5]], |_, x| x[0].softmax(1));
    run("softmax/first", &[&[3, 5]], |_, x| x[0].softmax(0));
    run("softmax/middle", &[&[2, 3, 4]], |_, x| x[0].softmax(1));
}

#[test]
fn causal_softmax() {
    run("causal_mask", &[&[2, 4, 4]], |_, x| x[0].causal_mask()?.softmax(2));
}

#[test]
fn layer_norm() {
    run("layer_norm", &[&[3, 6]], |_, x| x[0].layer_norm(1e-5));
}

#[test]
fn gelu() {
    run("gelu", &[&[4, 4]], |_, x| Ok(x[0].gelu()));
}

#[test]
fn embedding_lookup() {
    run("embedding", &[&[5, 3]], |_, x| x[0].embedding(&[4, 0, 4, 2]));
}

#[test]
fn dropout_with_fixed_mask() {
    run("dropout", &[&[4, 8]], |_, x| x[0].dropout(0.3, 99));
}

#[test]
fn cross_entropy() {
    run("cross_entropy", &[&[4, 6]], |_, x| x[0].cross_entropy(&[0, 5, 2, 2]));
}

#[test]
fn composite_attention_like_graph() {
    run("attention", &[&[2, 4, 3], &[2, 4, 3], &[2, 4, 3]], |_, x| {
        let scores = x[0].matmul(x[1].transpose(1, 2)?)?.scale(0.5);
        scores.causal_mask()?.softmax(2)?.matmul(x[2])
    });
}
