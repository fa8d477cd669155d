//! GPT-2-style decoder-only transformer: learned absolute positions,
//! pre-norm blocks with 4× MLPs, optional weight tying between the token
//! embedding and the LM head.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use xfer_tensor::{checkpoint, ParamId, ParamSet, Real, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, fnv1a, stream_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
    pub init_std: f64,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// 6 layers, 6 heads, hidden 768, context 256.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            n_layers: 6,
            n_heads: 6,
            hidden: 768,
            context_len: 256,
            vocab_size,
            tie_embeddings: true,
            init_std: 0.02,
            dropout: 0.1,
            ln_eps: 1e-5,
        }
    }

    /// 2 layers, 2 heads, hidden 64, context 64: trains in seconds on a CPU.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            hidden: 64,
            context_len: 64,
            ..Self::paper(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("model config: {m}")));
        if self.n_layers == 0 || self.n_heads == 0 || self.hidden == 0 {
            return bad("layers, heads and hidden size must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return bad(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.n_heads
            ));
        }
        if self.context_len < 2 {
            return bad(format!("context length {} < 2", self.context_len));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocabulary {} < 2", self.vocab_size));
        }
        let positive = |x: f64| x > 0.0; // false for NaN
        if !(0.0..1.0).contains(&self.dropout) || !positive(self.init_std) || !positive(self.ln_eps) {
            return bad("dropout must be in [0, 1); init_std and ln_eps positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Closed-form parameter count, tied embeddings counted once.
    pub fn param_count(&self) -> usize {
        let (h, v, c) = (self.hidden, self.vocab_size, self.context_len);
        let block = 4 * (h * h + h) + 2 * (4 * h * h) + 4 * h + h + 4 * h;
        let head = if self.tie_embeddings { 0 } else { h * v };
        v * h + c * h + self.n_layers * block + 2 * h + head
    }
}

/// What happens to the position table when embeddings are re-initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionPolicy {
    #[default]
    Redraw,
    Keep,
}

struct BlockIds {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    w1: (ParamId, ParamId),
    w2: (ParamId, ParamId),
}

struct Ids {
    wte: ParamId,
    wpe: ParamId,
    blocks: Vec<BlockIds>,
    ln_f: (ParamId, ParamId),
    lm_head: Option<ParamId>,
}

impl Ids {
    fn resolve<T: Real>(config: &ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        let id = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
        };
        let pair = |prefix: String, w: &str, b: &str| -> Result<(ParamId, ParamId)> {
            Ok((id(&format!("{prefix}.{w}"))?, id(&format!("{prefix}.{b}"))?))
        };
        let blocks = (0..config.n_layers)
            .map(|i| {
                let p = |s: &str| format!("blocks.{i}.{s}");
                Ok(BlockIds {
                    ln1: pair(p("ln1"), "g", "b")?,
                    wq: pair(p("attn"), "wq", "bq")?,
                    wk: pair(p("attn"), "wk", "bk")?,
                    wv: pair(p("attn"), "wv", "bv")?,
                    wo: pair(p("attn"), "wo", "bo")?,
                    ln2: pair(p("ln2"), "g", "b")?,
                    w1: pair(p("mlp"), "w1", "b1")?,
                    w2: pair(p("mlp"), "w2", "b2")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            wte: id("wte")?,
            wpe: id("wpe")?,
            blocks,
            ln_f: pair("ln_f".into(), "g", "b")?,
            lm_head: if config.tie_embeddings {
                None
            } else {
                Some(id("lm_head")?)
            },
        })
    }
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Parameter names and shapes in creation order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, v) = (config.hidden, config.vocab_size);
    let mut out = vec![
        ("wte".to_string(), vec![v, h], Init::Normal),
        ("wpe".to_string(), vec![config.context_len, h], Init::Normal),
    ];
    for i in 0..config.n_layers {
        let p = |s: &str| format!("blocks.{i}.{s}");
        out.push((p("ln1.g"), vec![h], Init::Ones));
        out.push((p("ln1.b"), vec![h], Init::Zeros));
        for w in ["q", "k", "v", "o"] {
            out.push((p(&format!("attn.w{w}")), vec![h, h], Init::Normal));
            out.push((p(&format!("attn.b{w}")), vec![h], Init::Zeros));
        }
        out.push((p("ln2.g"), vec![h], Init::Ones));
        out.push((p("ln2.b"), vec![h], Init::Zeros));
        out.push((p("mlp.w1"), vec![h, 4 * h], Init::Normal));
        out.push((p("mlp.b1"), vec![4 * h], Init::Zeros));
        out.push((p("mlp.w2"), vec![4 * h, h], Init::Normal));
        out.push((p("mlp.b2"), vec![h], Init::Zeros));
    }
    out.push(("ln_f.g".to_string(), vec![h], Init::Ones));
    out.push(("ln_f.b".to_string(), vec![h], Init::Zeros));
    if !config.tie_embeddings {
        out.push(("lm_head".to_string(), vec![h, v], Init::Normal));
    }
    out
}

fn is_embedding(name: &str) -> bool {
    matches!(name, "wte" | "wpe" | "lm_head")
}

/// N(0, std²) values from a stream keyed by the parameter's label, so a
/// tensor's draw does not depend on any other tensor's shape.
fn normal_tensor<T: Real>(shape: &[usize], std: f64, seed: u64, label: &str) -> Tensor<T> {
    let mut rng = stream_rng(seed, fnv1a(label.as_bytes()));
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(&mut rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

pub struct CausalLm<T: Real> {
    config: ModelConfig,
    pub params: ParamSet<T>,
    ids: Ids,
}

impl<T: Real> Clone for CausalLm<T> {
    fn clone(&self) -> Self {
        Self::from_params(self.config.clone(), self.params.clone()).expect("valid model")
    }
}

impl<T: Real> CausalLm<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape, init) in layout(&config) {
            let value = match init {
                Init::Normal => normal_tensor(&shape, config.init_std, seed, &name),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, T::one()),
            };
            params.insert(name, value);
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in layout(&config) {
            let p = params
                .by_name(&name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, config implies {shape:?}",
                    p.value.shape()
                )));
            }
        }
        let ids = Ids::resolve(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Real>(&self) -> CausalLm<U> {
        CausalLm::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    /// Redraws the token embedding, the LM head (when untied) and the
    /// position table; every other parameter is left bit-identical.
    pub fn reinit_embeddings(&mut self, seed: u64) {
        self.reinit_embeddings_with(seed, PositionPolicy::Redraw);
    }

    pub fn reinit_embeddings_with(&mut self, seed: u64, positions: PositionPolicy) {
        let std = self.config.init_std;
        for p in self.params.iter_mut() {
            if !is_embedding(&p.name) || (p.name == "wpe" && positions == PositionPolicy::Keep) {
                continue;
            }
            p.value = normal_tensor(p.value.shape(), std, seed, &format!("reinit/{}", p.name));
            p.grad = None;
        }
    }

    /// Re-allocates the vocabulary-sized matrices for `new_vocab` and
    /// redraws the embeddings as [`Self::reinit_embeddings_with`] does.
    pub fn resize_vocab(&mut self, new_vocab: usize, seed: u64, positions: PositionPolicy) -> Result<()> {
        if new_vocab < 2 {
            return Err(Error::invalid(format!("vocabulary {new_vocab} < 2")));
        }
        let h = self.config.hidden;
        for p in self.params.iter_mut() {
            match p.name.as_str() {
                "wte" => p.value = Tensor::zeros(&[new_vocab, h]),
                "lm_head" => p.value = Tensor::zeros(&[h, new_vocab]),
                _ => {}
            }
        }
        self.config.vocab_size = new_vocab;
        self.reinit_embeddings_with(seed, positions);
        Ok(())
    }

    /// Logits `[batch * len, vocab]` for `batch` rows of `len` tokens.
    /// `dropout_seed` enables dropout (training); `None` runs deterministically.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        ids: &[u32],
        batch: usize,
        dropout_seed: Option<u64>,
    ) -> Result<Var<'t, T>> {
        let c = &self.config;
        if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
            return Err(Error::invalid(format!("{} ids do not form {batch} rows", ids.len())));
        }
        let len = ids.len() / batch;
        if len > c.context_len {
            return Err(Error::invalid(format!(
                "row length {len} exceeds context length {}",
                c.context_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside model vocabulary of {}",
                c.vocab_size
            )));
        }
        let (h, nh, hd) = (c.hidden, c.n_heads, c.head_dim());
        let p = |id| tape.param(&self.params, id);
        let drop = |x: Var<'t, T>, site: &str| -> Result<Var<'t, T>> {
            match dropout_seed {
                Some(seed) if c.dropout > 0.0 => Ok(x.dropout(c.dropout, derive_seed(seed, site))?),
                _ => Ok(x),
            }
        };
        let norm = |x: Var<'t, T>, (g, b): (ParamId, ParamId)| -> Result<Var<'t, T>> {
            Ok(x.layer_norm(c.ln_eps)?.mul_bcast(p(g))?.add_bcast(p(b))?)
        };
        let linear =
            |x: Var<'t, T>, (w, b): (ParamId, ParamId)| -> Result<Var<'t, T>> { Ok(x.matmul(p(w))?.add_bcast(p(b))?) };

        let tokens: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let wpe = p(self.ids.wpe).slice(0, 0, len)?;
        let x = p(self.ids.wte)
            .embedding(&tokens)?
            .reshape(&[batch, len, h])?
            .add_bcast(wpe)?
            .reshape(&[batch * len, h])?;
        let mut x = drop(x, "embed")?;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        for (i, blk) in self.ids.blocks.iter().enumerate() {
            let a = norm(x, blk.ln1)?;
            let heads =
                |v: Var<'t, T>| -> Result<Var<'t, T>> { Ok(v.reshape(&[batch, len, nh, hd])?.transpose(1, 2)?) };
            let q = heads(linear(a, blk.wq)?)?;
            let k = heads(linear(a, blk.wk)?)?;
            let v = heads(linear(a, blk.wv)?)?;
            let att = q.matmul(k.transpose(2, 3)?)?.scale(scale).causal_mask()?.softmax(3)?;
            let att = drop(att, &format!("{i}/attn"))?;
            let y = att.matmul(v)?.transpose(1, 2)?.reshape(&[batch * len, h])?;
            let y = drop(linear(y, blk.wo)?, &format!("{i}/resid1"))?;
            x = x.add(y)?;
            let m = linear(norm(x, blk.ln2)?, blk.w1)?.gelu();
            let m = drop(linear(m, blk.w2)?, &format!("{i}/resid2"))?;
            x = x.add(m)?;
        }
        let x = norm(x, self.ids.ln_f)?;
        let head = match self.ids.lm_head {
            Some(id) => p(id),
            None => p(self.ids.wte).transpose(0, 1)?,
        };
        Ok(x.matmul(head)?)
    }

    /// Deterministic logits `[len, vocab]` for one row.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        Ok(self.forward(&tape, ids, 1, None)?.value())
    }

    /// Next-token training loss over `batch` rows: positions `0..len-1`
    /// predict `1..len`.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape<T>,
        rows: &[u32],
        batch: usize,
        dropout_seed: Option<u64>,
    ) -> Result<Var<'t, T>> {
        if batch == 0 || !rows.len().is_multiple_of(batch) || rows.len() / batch < 2 {
            return Err(Error::invalid("loss needs rows of at least 2 tokens"));
        }
        let len = rows.len() / batch;
        let mut inputs = Vec::with_capacity(batch * (len - 1));
        let mut targets = Vec::with_capacity(batch * (len - 1));
        for row in rows.chunks_exact(len) {
            inputs.extend_from_slice(&row[..len - 1]);
            targets.extend(row[1..].iter().map(|&t| t as usize));
        }
        let logits = self.forward(tape, &inputs, batch, dropout_seed)?;
        Ok(logits.cross_entropy(&targets)?)
    }

    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        checkpoint::save(&self.params, config, stem.as_ref())?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let (params, manifest) = checkpoint::load(stem.as_ref())?;
        let config: ModelConfig =
            serde_json::from_value(manifest.config).map_err(|e| Error::invalid(format!("checkpoint config: {e}")))?;
        Self::from_params(config, params)
    }
}

/// `-log softmax(row)[target]`, accumulated in f64.
pub fn row_nll<T: Real>(row: &[T], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, z| m.max(z.as_f64()));
    let sum: f64 = row.iter().map(|z| (z.as_f64() - max).exp()).sum();
    max + sum.ln() - row[target].as_f64()
}

/// Mean next-token cross-entropy (nats/token) of `block` under `[len, vocab]` logits.
pub fn lm_cross_entropy<T: Real>(logits: &Tensor<T>, block: &[u32]) -> Result<f64> {
    let n = block.len();
    if n < 2 {
        return Err(Error::invalid("cross-entropy needs at least 2 tokens"));
    }
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != n {
        return Err(Error::invalid(format!(
            "logits of shape {shape:?} do not match a block of {n} tokens"
        )));
    }
    let v = shape[1];
    let mut total = 0.0;
    for i in 0..n - 1 {
        let target = block[i + 1] as usize;
        if target >= v {
            return Err(Error::invalid(format!("token {target} outside vocabulary of {v}")));
        }
        total += row_nll(logits.row(i), target);
    }
    Ok(total / (n - 1) as f64)
}
