//! Central finite-difference gradient checking.
//!
//! The oracle only evaluates the forward pass, so it stays independent of the
//! backward rules it is used to verify.

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    /// max over elements of `|analytic - numeric| / (|numeric| + 1e-8)`
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            checked: self.checked + other.checked,
        }
    }

    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        self.max_abs_err = self.max_abs_err.max(abs);
        self.max_rel_err = self.max_rel_err.max(abs / (numeric.abs() + 1e-8));
        self.checked += 1;
    }
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// Gradients of `f` at `inputs` from one reverse sweep.
pub fn analytic<T, F>(inputs: &[Tensor<T>], f: F) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.gradients(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| match grads.get(*v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; x.numel()],
        })
        .collect())
}

/// Element-by-element central differences of `f` at `inputs`.
pub fn numeric<T, F>(inputs: &[Tensor<T>], h: f64, f: F) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item().as_f64())
    };
    let mut probe = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j].as_f64();
            g.push(central_difference(
                |x| {
                    probe[i].data_mut()[j] = T::of(x);
                    eval(&probe)
                },
                x0,
                h,
            )?);
            probe[i].data_mut()[j] = T::of(x0);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheck {
    let mut report = GradCheck::default();
    for (a, n) in analytic.iter().zip(numeric) {
        for (a, n) in a.iter().zip(n) {
            report.record(*a, *n);
        }
    }
    report
}

/// Checks every input element of a scalar-valued function built on a tape.
pub fn check<T, F>(inputs: &[Tensor<T>], h: f64, f: F) -> Result<GradCheck>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let a = analytic(inputs, &f)?;
    let n = numeric(inputs, h, &f)?;
    Ok(compare(&a, &n))
}
