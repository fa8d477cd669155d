//! Reference corpora: Zipf–Mandelbrot unigram weights, hierarchically
//! balanced parentheses, and the uniform-random baseline.
//!
//! Every sequence draws from its own ChaCha8 stream (`seed`, sequence
//! index), so a corpus is a pure function of its spec and seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_text_dir, write_jsonl, Corpus, TokenSequence};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, RNG_ID};
use crate::tokenizer::tokenize_target;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipfMandelbrotParams {
    pub alpha: f64,
    pub beta: f64,
    pub vocab_size: usize,
}

impl ZipfMandelbrotParams {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            alpha: 1.0,
            beta: 2.7,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Written so that NaN fails too.
        let ok = self.alpha > 0.0 && self.beta > -1.0;
        if !ok || self.vocab_size == 0 {
            return Err(Error::invalid(format!(
                "Zipf–Mandelbrot needs alpha > 0, beta > -1, vocab >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Unnormalized weight `(rank + beta)^-alpha` of a 1-based rank.
pub fn zm_weight(rank: usize, params: &ZipfMandelbrotParams) -> Result<f64> {
    params.validate()?;
    if rank == 0 || rank > params.vocab_size {
        return Err(Error::invalid(format!("rank {rank} outside 1..={}", params.vocab_size)));
    }
    Ok((rank as f64 + params.beta).powf(-params.alpha))
}

/// Token id `i` gets the weight of rank `i + 1`.
pub fn zm_dist(params: &ZipfMandelbrotParams) -> Result<UnigramDist> {
    params.validate()?;
    let weights = (1..=params.vocab_size)
        .map(|r| zm_weight(r, params))
        .collect::<Result<_>>()?;
    UnigramDist::new(weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnigramDist {
    weights: Vec<f64>,
}

impl UnigramDist {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("unigram weights must be finite and non-negative"));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::invalid("unigram distribution needs a positive weight"));
        }
        Ok(Self { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn probs(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.weights).expect("validated weights")
    }
}

/// Empirical token frequencies, indexed by token id over the corpus vocab.
pub fn unigram_from_corpus(corpus: &Corpus) -> Result<UnigramDist> {
    if corpus.total_tokens() == 0 {
        return Err(Error::invalid(
            "cannot estimate a unigram distribution from an empty corpus",
        ));
    }
    let mut counts = vec![0.0; corpus.vocab_size()];
    for t in corpus.tokens() {
        counts[t as usize] += 1.0;
    }
    UnigramDist::new(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParenSpec {
    pub dist: UnigramDist,
    pub open_prob: f64,
    pub max_depth: usize,
    /// Inclusive bounds on tokens per sequence; only even lengths are drawn.
    pub seq_len_range: (usize, usize),
}

impl ParenSpec {
    pub fn new(dist: UnigramDist) -> Self {
        Self {
            dist,
            open_prob: 0.4,
            max_depth: 16,
            seq_len_range: (64, 512),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.seq_len_range;
        if !(self.open_prob > 0.0 && self.open_prob < 1.0) {
            return Err(Error::invalid(format!(
                "open_prob must be in (0, 1), got {}",
                self.open_prob
            )));
        }
        if self.max_depth == 0 {
            return Err(Error::invalid("max_depth must be at least 1"));
        }
        if lo < 2 || hi < lo || (lo % 2 == 1 && lo == hi) {
            return Err(Error::invalid(format!(
                "sequence length range {lo}..={hi} must contain an even length >= 2"
            )));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        2 * self.dist.len()
    }
}

pub fn open_token(word: usize) -> u32 {
    (2 * word) as u32
}

pub fn close_token(word: usize) -> u32 {
    (2 * word + 1) as u32
}

/// Balanced bracket sequences: open `w` is token `2w`, its matching close
/// is `2w + 1`. Each sequence lands exactly on its drawn even length: an
/// open is only allowed while there is room left to close everything.
pub fn gen_paren_corpus(spec: &ParenSpec, total_tokens: usize, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let (lo, hi) = spec.seq_len_range;
    let lo = lo + lo % 2;
    if total_tokens < lo {
        return Err(Error::invalid(format!(
            "total_tokens {total_tokens} is below the minimum sequence length {lo}"
        )));
    }
    if total_tokens % 2 == 1 {
        return Err(Error::invalid(format!(
            "balanced corpora have an even token count, got {total_tokens}"
        )));
    }
    let words = spec.dist.sampler();
    let mut sequences = Vec::new();
    let mut remaining = total_tokens;
    let mut index = 0u64;
    while remaining > 0 {
        let mut rng = stream_rng(seed, index);
        let len = (2 * rng.random_range(lo / 2..=hi / 2)).min(remaining);
        sequences.push(paren_sequence(spec, &words, len, &mut rng));
        remaining -= len;
        index += 1;
    }
    Corpus::with_vocab(sequences, spec.vocab_size())
}

fn paren_sequence(spec: &ParenSpec, words: &WeightedIndex<f64>, len: usize, rng: &mut ChaCha8Rng) -> TokenSequence {
    let mut out = Vec::with_capacity(len);
    let mut stack: Vec<usize> = Vec::with_capacity(spec.max_depth);
    while out.len() < len {
        let room = len - out.len();
        let open =
            stack.is_empty() || (stack.len() < spec.max_depth && room > stack.len() && rng.random_bool(spec.open_prob));
        if open {
            let w = words.sample(rng);
            stack.push(w);
            out.push(open_token(w));
        } else {
            let w = stack.pop().expect("non-empty stack");
            out.push(close_token(w));
        }
    }
    debug_assert!(stack.is_empty());
    TokenSequence::new(out).expect("length >= 2")
}

/// IID uniform tokens in sequences of `seq_len`; the last may be shorter.
pub fn gen_random_corpus(vocab_size: usize, total_tokens: usize, seq_len: usize, seed: u64) -> Result<Corpus> {
    if vocab_size == 0 || seq_len == 0 || total_tokens == 0 {
        return Err(Error::invalid(
            "random corpus needs vocab, seq_len and total_tokens >= 1",
        ));
    }
    let n = total_tokens.div_ceil(seq_len);
    let sequences = (0..n)
        .map(|i| {
            let len = seq_len.min(total_tokens - i * seq_len);
            let mut rng = stream_rng(seed, i as u64);
            let tokens = (0..len).map(|_| rng.random_range(0..vocab_size) as u32).collect();
            TokenSequence::new(tokens).expect("len >= 1")
        })
        .collect();
    Corpus::with_vocab(sequences, vocab_size)
}

/// Generator specs as accepted on the command line and recorded in metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum SynthSpec {
    ParenZm {
        zm: ZipfMandelbrotParams,
        open_prob: f64,
        max_depth: usize,
        seq_len_range: (usize, usize),
    },
    /// Brackets drawn from the unigram distribution of tokenized text.
    ParenReal {
        from_text: PathBuf,
        bpe_vocab: usize,
        open_prob: f64,
        max_depth: usize,
        seq_len_range: (usize, usize),
    },
    Random {
        vocab_size: usize,
        seq_len: usize,
    },
}

impl SynthSpec {
    pub fn paren_zm(zm: ZipfMandelbrotParams) -> Self {
        let d = ParenSpec::new(UnigramDist { weights: vec![1.0] });
        SynthSpec::ParenZm {
            zm,
            open_prob: d.open_prob,
            max_depth: d.max_depth,
            seq_len_range: d.seq_len_range,
        }
    }
}

/// Builds the corpus a spec describes. Paren-real specs tokenize their
/// text (a file or a directory of `.txt` files) first.
pub fn generate(spec: &SynthSpec, total_tokens: usize, seed: u64) -> Result<Corpus> {
    match spec {
        SynthSpec::ParenZm {
            zm,
            open_prob,
            max_depth,
            seq_len_range,
        } => {
            let paren = ParenSpec {
                dist: zm_dist(zm)?,
                open_prob: *open_prob,
                max_depth: *max_depth,
                seq_len_range: *seq_len_range,
            };
            gen_paren_corpus(&paren, total_tokens, seed)
        }
        SynthSpec::ParenReal {
            from_text,
            bpe_vocab,
            open_prob,
            max_depth,
            seq_len_range,
        } => {
            let text = if from_text.is_dir() {
                read_text_dir(from_text)?
            } else {
                fs::read_to_string(from_text).map_err(Error::io(from_text))?
            };
            let (_, tokens) = tokenize_target(&text, *bpe_vocab)?;
            let paren = ParenSpec {
                dist: unigram_from_corpus(&tokens)?,
                open_prob: *open_prob,
                max_depth: *max_depth,
                seq_len_range: *seq_len_range,
            };
            gen_paren_corpus(&paren, total_tokens, seed)
        }
        SynthSpec::Random { vocab_size, seq_len } => gen_random_corpus(*vocab_size, total_tokens, *seq_len, seed),
    }
}

/// Sidecar written next to every generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenMetadata {
    pub spec: SynthSpec,
    pub seed: u64,
    pub total_tokens: usize,
    pub vocab_size: usize,
    pub rng: String,
}

impl GenMetadata {
    pub fn new(spec: SynthSpec, seed: u64, corpus: &Corpus) -> Self {
        Self {
            spec,
            seed,
            total_tokens: corpus.total_tokens(),
            vocab_size: corpus.vocab_size(),
            rng: RNG_ID.to_string(),
        }
    }
}

/// `out/corpus.jsonl` → `out/corpus.meta.json`.
pub fn metadata_path(corpus_path: &Path) -> PathBuf {
    corpus_path.with_extension("meta.json")
}

pub fn write_generated(corpus: &Corpus, meta: &GenMetadata, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    write_jsonl(corpus, path)?;
    let meta_path = metadata_path(path);
    let text = serde_json::to_string_pretty(meta).map_err(Error::json(&meta_path))?;
    fs::write(&meta_path, text + "\n").map_err(Error::io(&meta_path))?;
    Ok(meta_path)
}
