//! Token corpora: the JSON Lines interchange format, token budgets, and
//! packing into fixed-length training blocks.
//!
//! A corpus file holds one JSON array of non-negative integers per line:
//!
//! ```text
//! [3, 1, 4, 1, 5, 9, 2]
//! [2, 3, 8, 4]
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Token ids must be strictly below this value (they fit a signed 32-bit
/// integer with room for one reserved id above the largest vocabulary).
pub const TOKEN_LIMIT: u32 = i32::MAX as u32;

/// One utterance. Never empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequences must be non-empty"));
        }
        Ok(Self(tokens))
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

impl Deref for TokenSequence {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl TryFrom<Vec<u32>> for TokenSequence {
    type Error = Error;

    fn try_from(tokens: Vec<u32>) -> Result<Self> {
        Self::new(tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    sequences: Vec<TokenSequence>,
    vocab_size: usize,
}

impl Corpus {
    /// Vocabulary inferred as max id + 1 (0 for an empty corpus).
    pub fn new(sequences: Vec<TokenSequence>) -> Self {
        let vocab_size = max_id(&sequences).map_or(0, |m| m as usize + 1);
        Self { sequences, vocab_size }
    }

    /// Declares a vocabulary at least as large as the observed ids.
    pub fn with_vocab(sequences: Vec<TokenSequence>, vocab_size: usize) -> Result<Self> {
        if let Some(m) = max_id(&sequences) {
            if m as usize >= vocab_size {
                return Err(Error::invalid(format!(
                    "token id {m} does not fit declared vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(Self { sequences, vocab_size })
    }

    pub fn from_vecs(seqs: Vec<Vec<u32>>) -> Result<Self> {
        Ok(Self::new(
            seqs.into_iter().map(TokenSequence::new).collect::<Result<_>>()?,
        ))
    }

    pub fn sequences(&self) -> &[TokenSequence] {
        &self.sequences
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.sequences.iter().flat_map(|s| s.iter().copied())
    }

    /// Splits after the first `n` tokens, cutting a sequence if needed.
    /// Both halves keep the declared vocabulary.
    pub fn split_at_token(&self, n: usize) -> (Corpus, Corpus) {
        let mut head = Vec::new();
        let mut tail = Vec::new();
        let mut seen = 0;
        for seq in &self.sequences {
            if seen >= n {
                tail.push(seq.clone());
            } else if seen + seq.len() <= n {
                head.push(seq.clone());
            } else {
                let cut = n - seen;
                head.push(TokenSequence(seq[..cut].to_vec()));
                tail.push(TokenSequence(seq[cut..].to_vec()));
            }
            seen += seq.len();
        }
        let vocab = self.vocab_size;
        (
            Corpus {
                sequences: head,
                vocab_size: vocab,
            },
            Corpus {
                sequences: tail,
                vocab_size: vocab,
            },
        )
    }
}

fn max_id(seqs: &[TokenSequence]) -> Option<u32> {
    seqs.iter().flat_map(|s| s.iter().copied()).max()
}

/// Largest token id + 1.
pub fn infer_vocab(corpus: &Corpus) -> Result<usize> {
    max_id(&corpus.sequences)
        .map(|m| m as usize + 1)
        .ok_or_else(|| Error::invalid("cannot infer the vocabulary of an empty corpus"))
}

/// Streams sequences from a JSONL source without holding the whole file.
pub struct JsonlReader<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    line: usize,
}

impl JsonlReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(Error::io(path))?;
        Ok(Self::new(BufReader::new(file), path))
    }
}

impl<R: BufRead> JsonlReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        Self {
            lines: reader.lines(),
            path: path.into(),
            line: 0,
        }
    }

    fn invalid(&self, message: String) -> Error {
        Error::Validation {
            path: self.path.clone(),
            line: self.line,
            message,
        }
    }

    fn parse(&self, text: &str) -> Result<TokenSequence> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: self.path.clone(),
            line: self.line,
            message: e.to_string(),
        })?;
        let Value::Array(items) = value else {
            return Err(self.invalid("expected a JSON array of token ids".into()));
        };
        if items.is_empty() {
            return Err(self.invalid("empty sequence".into()));
        }
        let mut tokens = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let id = item
                .as_u64()
                .ok_or_else(|| self.invalid(format!("element {i} ({item}) is not a non-negative integer")))?;
            if id >= u64::from(TOKEN_LIMIT) {
                return Err(self.invalid(format!("element {i} ({id}) exceeds the token id limit {TOKEN_LIMIT}")));
            }
            tokens.push(id as u32);
        }
        Ok(TokenSequence(tokens))
    }
}

impl<R: BufRead> Iterator for JsonlReader<R> {
    type Item = Result<TokenSequence>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(Error::io(self.path.clone())(e))),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            return Some(self.parse(&text));
        }
    }
}

/// Reads a whole JSONL corpus; blank lines are skipped.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
    let sequences = JsonlReader::open(path)?.collect::<Result<Vec<_>>>()?;
    Ok(Corpus::new(sequences))
}

/// Writes one `[a, b, c]` line per sequence.
pub fn write_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(m) = max_id(&corpus.sequences) {
        if m >= TOKEN_LIMIT {
            return Err(Error::TokenRange {
                id: u64::from(m),
                limit: u64::from(TOKEN_LIMIT),
            });
        }
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let mut out = BufWriter::new(file);
    let mut line = String::new();
    for seq in &corpus.sequences {
        line.clear();
        line.push('[');
        for (i, t) in seq.iter().enumerate() {
            if i > 0 {
                line.push_str(", ");
            }
            line.push_str(&t.to_string());
        }
        line.push_str("]\n");
        out.write_all(line.as_bytes()).map_err(Error::io(path))?;
    }
    out.flush().map_err(Error::io(path))
}

/// Repeats `corpus` pass after pass until `budget` tokens are reached, then
/// cuts the last sequence so the total is exactly `budget`. With a seed,
/// every pass after the first visits the sequences in a fresh shuffled order.
pub fn fit_to_token_budget(corpus: &Corpus, budget: usize, seed: Option<u64>) -> Result<Corpus> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot fit an empty corpus to a token budget"));
    }
    if budget == 0 {
        return Err(Error::invalid("token budget must be at least 1"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = seed.map(|s| stream_rng(s, 0));
    let mut out = Vec::new();
    let mut total = 0;
    let mut pass = 0usize;
    'passes: loop {
        if pass > 0 {
            if let Some(rng) = rng.as_mut() {
                order.shuffle(rng);
            }
        }
        for &i in &order {
            let seq = &corpus.sequences[i];
            let room = budget - total;
            if seq.len() >= room {
                out.push(TokenSequence(seq[..room].to_vec()));
                break 'passes;
            }
            out.push(seq.clone());
            total += seq.len();
        }
        pass += 1;
    }
    Ok(Corpus {
        sequences: out,
        vocab_size: corpus.vocab_size,
    })
}

/// Fixed-length training rows cut from an EOS-joined token stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSet {
    tokens: Vec<u32>,
    block_len: usize,
    eos_id: u32,
}

impl BlockSet {
    pub fn len(&self) -> usize {
        self.tokens.len() / self.block_len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    pub fn block(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.block_len..(i + 1) * self.block_len]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks_exact(self.block_len)
    }

    /// All blocks back to back.
    pub fn as_flat(&self) -> &[u32] {
        &self.tokens
    }
}

/// Joins sequences as `s1 EOS s2 EOS ...` and cuts the stream into
/// consecutive `block_len` rows, dropping the final partial row.
pub fn pack_into_blocks(corpus: &Corpus, block_len: usize, eos_id: u32) -> Result<BlockSet> {
    if block_len < 2 {
        return Err(Error::invalid(format!(
            "block length must be at least 2, got {block_len}"
        )));
    }
    if (eos_id as usize) < corpus.vocab_size {
        return Err(Error::invalid(format!(
            "EOS id {eos_id} collides with the data vocabulary of {}",
            corpus.vocab_size
        )));
    }
    let stream_len = corpus.total_tokens() + corpus.len();
    let keep = stream_len / block_len * block_len;
    let mut tokens = Vec::with_capacity(keep);
    'fill: for seq in &corpus.sequences {
        for &t in seq.iter().chain(std::iter::once(&eos_id)) {
            if tokens.len() == keep {
                break 'fill;
            }
            tokens.push(t);
        }
    }
    Ok(BlockSet {
        tokens,
        block_len,
        eos_id,
    })
}

/// Concatenates every `.txt` file in `dir`, in lexicographic filename order.
pub fn read_text_dir(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    let mut text = String::new();
    for f in files {
        text.push_str(&fs::read_to_string(&f).map_err(Error::io(&f))?);
    }
    Ok(text)
}
