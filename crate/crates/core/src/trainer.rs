//! AdamW with a linear-to-zero schedule, and token-weighted evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use xfer_tensor::{ParamSet, Real, Tape};

use crate::corpus::BlockSet;
use crate::error::{Error, Result};
use crate::model::{row_nll, CausalLm};
use crate::rng::{derive_seed, stream_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 32,
            epochs: 5,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }

    pub fn tune() -> Self {
        Self {
            epochs: 10,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1)
            && self.eps > 0.0
            && self.batch_size >= 1
            && self.epochs >= 1
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid training config {self:?}")))
        }
    }
}

/// `base_lr * (1 - step / total_steps)`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::invalid(format!(
            "schedule step {step} outside 0..={total_steps}"
        )));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64))
}

/// AdamW moment buffers, one per parameter in parameter-set order.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new<T: Real>(params: &ParamSet<T>) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
pub fn adamw_step<T: Real>(
    params: &mut ParamSet<T>,
    state: &mut OptimState,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::invalid("optimizer state does not match the parameter set"));
    }
    let (b1, b2) = config.betas;
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("parameter {} has no gradient", p.name)))?;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[j].as_f64();
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            let x = theta.as_f64();
            *theta = T::of(x - lr * (m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * x));
        }
    }
    state.step += 1;
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-6));
        for p in params.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Steps per epoch: full batches only. A set smaller than one batch is
/// trained as a single smaller batch.
pub fn steps_per_epoch(n_blocks: usize, batch_size: usize) -> usize {
    (n_blocks / batch_size).max(usize::from(n_blocks > 0))
}

/// Trains for `epochs × steps_per_epoch` AdamW steps on shuffled blocks.
pub fn train<T: Real>(model: &mut CausalLm<T>, blocks: &BlockSet, config: &TrainConfig) -> Result<Vec<StepLog>> {
    config.validate()?;
    if blocks.is_empty() {
        return Err(Error::invalid("cannot train on an empty block set"));
    }
    let n = blocks.len();
    let batch = config.batch_size.min(n);
    let per_epoch = steps_per_epoch(n, batch);
    let total = config.epochs * per_epoch;
    let mut state = OptimState::new(&model.params);
    let mut trace = Vec::with_capacity(total);
    let mut rows = Vec::with_capacity(batch * blocks.block_len());
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut stream_rng(derive_seed(config.seed, "shuffle"), epoch as u64));
        for chunk in order.chunks_exact(batch).take(per_epoch) {
            let step = trace.len();
            rows.clear();
            for &b in chunk {
                rows.extend_from_slice(blocks.block(b));
            }
            let tape = Tape::new();
            let dropout = derive_seed(config.seed, &format!("dropout/{step}"));
            let loss = model.loss(&tape, &rows, batch, Some(dropout))?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::invalid(format!("loss diverged to {value} at step {step}")));
            }
            model.params.zero_grad();
            tape.backward(loss, &mut model.params)?;
            drop(tape);
            if let Some(max) = config.grad_clip {
                clip_grad_norm(&mut model.params, max);
            }
            let lr = lr_at(step, total, config.lr)?;
            adamw_step(&mut model.params, &mut state, config, lr)?;
            if step % 100 == 0 {
                log::debug!("step {step}/{total} lr {lr:.2e} loss {value:.4}");
            }
            trace.push(StepLog { step, lr, loss: value });
        }
    }
    model.params.zero_grad();
    Ok(trace)
}

/// Token-weighted mean next-token cross-entropy over every block, in nats.
/// Runs without dropout and never touches the parameters.
pub fn evaluate<T: Real>(model: &CausalLm<T>, blocks: &BlockSet) -> Result<f64> {
    if blocks.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty block set"));
    }
    const EVAL_BATCH: usize = 16;
    let len = blocks.block_len();
    let v = model.vocab_size();
    let mut total = 0.0;
    let mut count = 0usize;
    for group in blocks.as_flat().chunks(EVAL_BATCH * len) {
        let rows = group.len() / len;
        let tape = Tape::new();
        let logits = model.forward(&tape, group, rows, None)?.value();
        let data = logits.data();
        for (r, row) in group.chunks_exact(len).enumerate() {
            for i in 0..len - 1 {
                let at = (r * len + i) * v;
                total += row_nll(&data[at..at + v], row[i + 1] as usize);
            }
            count += len - 1;
        }
    }
    Ok(total / count as f64)
}

pub fn write_loss_csv(trace: &[StepLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "step,lr,loss")?;
        for s in trace {
            writeln!(out, "{},{:e},{}", s.step, s.lr, s.loss)?;
        }
        out.flush()
    };
    write().map_err(Error::io(path))
}
