//! Byte-level byte pair encoding.
//!
//! Text is split into pre-tokens (maximal runs of whitespace or of
//! non-whitespace characters); merges never cross a pre-token boundary.
//! Ids `0..256` are raw bytes, `256..256 + merges` are merged symbols in
//! acquisition order, and the reserved specials come last.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenSequence};
use crate::error::{Error, Result};

pub const BYTE_SYMBOLS: usize = 256;
pub const EOS: &str = "<eos>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(u32, u32)>,
    /// Byte string of every non-special symbol, indexed by id.
    symbols: Vec<Vec<u8>>,
    specials: Vec<String>,
    ranks: HashMap<(u32, u32), u32>,
    requested_vocab: usize,
}

impl BpeModel {
    fn from_merges(merges: Vec<(u32, u32)>, specials: Vec<String>, requested_vocab: usize) -> Result<Self> {
        let mut symbols: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let next = symbols.len() as u32;
            if l >= next || r >= next {
                return Err(Error::invalid(format!(
                    "merge {rank} refers to a symbol that does not exist yet"
                )));
            }
            let mut joined = symbols[l as usize].clone();
            joined.extend_from_slice(&symbols[r as usize]);
            symbols.push(joined);
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(Error::invalid(format!("merge {rank} repeats an earlier merge")));
            }
        }
        Ok(Self {
            merges,
            symbols,
            specials,
            ranks,
            requested_vocab,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + self.specials.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    /// Ids below this are ordinary byte/merge symbols.
    pub fn data_vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn eos_id(&self) -> Option<u32> {
        self.special_id(EOS)
    }

    pub fn special_id(&self, name: &str) -> Option<u32> {
        self.specials
            .iter()
            .position(|s| s == name)
            .map(|i| (self.symbols.len() + i) as u32)
    }

    /// How many ids the training text could not fill.
    pub fn shortfall(&self) -> usize {
        self.requested_vocab.saturating_sub(self.vocab_size())
    }

    pub fn symbol_bytes(&self, id: u32) -> Option<&[u8]> {
        self.symbols.get(id as usize).map(Vec::as_slice)
    }

    /// A model with only the first `n` merges.
    pub fn truncated(&self, n: usize) -> BpeModel {
        let n = n.min(self.merges.len());
        Self::from_merges(self.merges[..n].to_vec(), self.specials.clone(), self.requested_vocab)
            .expect("a prefix of a valid merge list is valid")
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pre_tokenize(text) {
            self.encode_piece(piece.as_bytes(), &mut out);
        }
        out
    }

    fn encode_piece(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut word: Vec<u32> = bytes.iter().map(|b| u32::from(*b)).collect();
        // Lowest rank first is the same as replaying the merge list in
        // order: a merge can only create pairs of higher rank than itself.
        loop {
            let best = word
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|r| (*r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            word = merge_word(&word, pair, BYTE_SYMBOLS as u32 + rank);
        }
        out.extend_from_slice(&word);
    }

    pub fn decode_bytes(&self, tokens: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &t in tokens {
            match self.symbols.get(t as usize) {
                Some(bytes) => out.extend_from_slice(bytes),
                None => {
                    let special = self
                        .specials
                        .get((t as usize).wrapping_sub(self.symbols.len()))
                        .ok_or(Error::UnknownToken(t))?;
                    out.extend_from_slice(special.as_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, tokens: &[u32]) -> Result<String> {
        String::from_utf8(self.decode_bytes(tokens)?).map_err(|_| Error::InvalidUtf8)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = BpeFile {
            vocab_size: self.vocab_size(),
            requested_vocab_size: self.requested_vocab,
            specials: self.specials.clone(),
            merges: self
                .merges
                .iter()
                .map(|&(l, r)| {
                    [
                        escape_bytes(&self.symbols[l as usize]),
                        escape_bytes(&self.symbols[r as usize]),
                    ]
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(Error::json(path))?;
        fs::write(path, text + "\n").map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let file: BpeFile = serde_json::from_str(&text).map_err(Error::json(path))?;
        let mut ids: HashMap<Vec<u8>, u32> = (0..=255u8).map(|b| (vec![b], u32::from(b))).collect();
        let mut merges = Vec::with_capacity(file.merges.len());
        for (i, [l, r]) in file.merges.iter().enumerate() {
            let bad = |what: &str| Error::invalid(format!("{}: merge {i}: {what}", path.display()));
            let l = unescape_bytes(l).ok_or_else(|| bad("malformed byte escape"))?;
            let r = unescape_bytes(r).ok_or_else(|| bad("malformed byte escape"))?;
            let li = *ids.get(&l).ok_or_else(|| bad("unknown left symbol"))?;
            let ri = *ids.get(&r).ok_or_else(|| bad("unknown right symbol"))?;
            let mut joined = l;
            joined.extend_from_slice(&r);
            if ids.insert(joined, (BYTE_SYMBOLS + i) as u32).is_some() {
                return Err(bad("produces a duplicate symbol"));
            }
            merges.push((li, ri));
        }
        let model = Self::from_merges(merges, file.specials, file.requested_vocab_size)?;
        if model.vocab_size() != file.vocab_size {
            return Err(Error::invalid(format!(
                "{}: declared vocab_size {} but merges and specials give {}",
                path.display(),
                file.vocab_size,
                model.vocab_size()
            )));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct BpeFile {
    vocab_size: usize,
    #[serde(default)]
    requested_vocab_size: usize,
    specials: Vec<String>,
    merges: Vec<[String; 2]>,
}

/// Printable ASCII stays as is (backslash doubled); every other byte is `\xHH`.
pub fn escape_bytes(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => s.push_str("\\\\"),
            0x20..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    s
}

pub fn unescape_bytes(s: &str) -> Option<Vec<u8>> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] != b'\\' {
            out.push(raw[i]);
            i += 1;
            continue;
        }
        match raw.get(i + 1)? {
            b'\\' => {
                out.push(b'\\');
                i += 2;
            }
            b'x' => {
                let hex = std::str::from_utf8(raw.get(i + 2..i + 4)?).ok()?;
                out.push(u8::from_str_radix(hex, 16).ok()?);
                i += 4;
            }
            _ => return None,
        }
    }
    Some(out)
}

/// Maximal runs of whitespace and of non-whitespace characters.
pub fn pre_tokenize(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        let first = rest.chars().next()?;
        let ws = first.is_whitespace();
        let end = rest
            .char_indices()
            .find(|(_, c)| c.is_whitespace() != ws)
            .map_or(rest.len(), |(i, _)| i);
        let (piece, tail) = rest.split_at(end);
        rest = tail;
        Some(piece)
    })
}

fn merge_word(word: &[u32], pair: (u32, u32), new: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(new);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    out
}

/// A pair waiting in the merge queue, keyed by its count when pushed.
#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: (u32, u32),
}

impl Candidate {
    fn new(symbols: &[Vec<u8>], pair: (u32, u32), count: i64) -> Self {
        Self {
            count,
            left: symbols[pair.0 as usize].clone(),
            right: symbols[pair.1 as usize].clone(),
            pair,
        }
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // Max-heap: higher count wins, then the lexicographically smaller
    // (left, right) byte strings.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
            .then_with(|| other.pair.cmp(&self.pair))
    }
}

/// Greedy BPE training. `vocab_size` counts the 256 bytes, the merges and
/// one reserved EOS special. Training stops early when no pair occurs at
/// least twice; see [`BpeModel::shortfall`].
pub fn train_bpe(text: &str, vocab_size: usize) -> Result<BpeModel> {
    let specials = vec![EOS.to_string()];
    if text.is_empty() {
        return Err(Error::invalid("cannot train BPE on empty text"));
    }
    if vocab_size <= BYTE_SYMBOLS + specials.len() {
        return Err(Error::invalid(format!(
            "BPE vocabulary must exceed {} (bytes + specials), got {vocab_size}",
            BYTE_SYMBOLS + specials.len()
        )));
    }
    let target_merges = vocab_size - BYTE_SYMBOLS - specials.len();

    let mut word_freq: HashMap<&str, i64> = HashMap::new();
    for piece in pre_tokenize(text) {
        *word_freq.entry(piece).or_default() += 1;
    }
    let mut entries: Vec<(&str, i64)> = word_freq.into_iter().collect();
    entries.sort_unstable();
    let freqs: Vec<i64> = entries.iter().map(|e| e.1).collect();
    let mut words: Vec<Vec<u32>> = entries
        .iter()
        .map(|(w, _)| w.bytes().map(u32::from).collect())
        .collect();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.windows(2) {
            let pair = (p[0], p[1]);
            *counts.entry(pair).or_default() += freqs[wi];
            where_.entry(pair).or_default().push(wi);
        }
    }

    let mut symbols: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut known: HashMap<Vec<u8>, u32> = symbols.iter().cloned().zip(0u32..).collect();
    let mut merges: Vec<(u32, u32)> = Vec::new();

    let mut heap: BinaryHeap<Candidate> = counts
        .iter()
        .filter(|(_, c)| **c >= 2)
        .map(|(p, c)| Candidate::new(&symbols, *p, *c))
        .collect();

    while merges.len() < target_merges {
        let Some(top) = heap.pop() else { break };
        let live = counts.get(&top.pair).copied().unwrap_or(0);
        if live != top.count {
            continue; // stale
        }
        if top.count < 2 {
            break;
        }
        let mut joined = top.left.clone();
        joined.extend_from_slice(&top.right);
        if known.contains_key(&joined) {
            // Another pair already spells this byte string; merging it
            // again would make the symbol table ambiguous.
            continue;
        }
        let new_id = symbols.len() as u32;
        known.insert(joined.clone(), new_id);
        symbols.push(joined);
        merges.push(top.pair);

        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        let mut sites = where_.remove(&top.pair).unwrap_or_default();
        sites.dedup();
        for wi in sites {
            let old = &words[wi];
            if !old.windows(2).any(|p| (p[0], p[1]) == top.pair) {
                continue;
            }
            let f = freqs[wi];
            for p in old.windows(2) {
                let pair = (p[0], p[1]);
                *counts.get_mut(&pair).expect("counted pair") -= f;
                touched.insert(pair);
            }
            let new = merge_word(old, top.pair, new_id);
            for p in new.windows(2) {
                let pair = (p[0], p[1]);
                *counts.entry(pair).or_default() += f;
                touched.insert(pair);
                if p[0] == new_id || p[1] == new_id {
                    where_.entry(pair).or_default().push(wi);
                }
            }
            words[wi] = new;
        }
        let mut touched: Vec<(u32, u32)> = touched.into_iter().collect();
        touched.sort_unstable();
        for pair in touched {
            let c = counts[&pair];
            if c >= 2 && pair != top.pair {
                heap.push(Candidate::new(&symbols, pair, c));
            }
        }
        counts.remove(&top.pair);
    }

    BpeModel::from_merges(merges, specials, vocab_size)
}

/// Trains BPE on the whole text and encodes it one line per sequence,
/// skipping empty lines. The corpus vocabulary covers the ordinary symbols
/// only, so the model's EOS id is the first id above it.
pub fn tokenize_target(text: &str, vocab_size: usize) -> Result<(BpeModel, Corpus)> {
    let model = train_bpe(text, vocab_size)?;
    let mut cache: HashMap<&str, Vec<u32>> = HashMap::new();
    let mut sequences = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let mut ids = Vec::new();
        for piece in pre_tokenize(line) {
            let enc = cache.entry(piece).or_insert_with(|| {
                let mut v = Vec::new();
                model.encode_piece(piece.as_bytes(), &mut v);
                v
            });
            ids.extend_from_slice(enc);
        }
        sequences.push(TokenSequence::new(ids)?);
    }
    let corpus = Corpus::with_vocab(sequences, model.data_vocab_size())?;
    Ok((model, corpus))
}
