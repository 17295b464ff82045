//! Corpora, byte tokenization, synthetic Markov sources and batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

pub const TOKEN_FILE_MAGIC: &[u8; 8] = b"LETTOK01";
const ROW_SUM_TOL: f64 = 1e-9;
const MAX_MARKOV_STATES: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    File,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    tokens: Vec<u32>,
    vocab_size: usize,
    provenance: Provenance,
}

impl Corpus {
    pub fn new(tokens: Vec<u32>, vocab_size: usize, provenance: Provenance) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Data(format!("corpus needs at least 2 tokens, got {}", tokens.len())));
        }
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= vocab_size) {
            return Err(Error::Data(format!(
                "token {} at position {pos} out of range for vocab {vocab_size}",
                tokens[pos]
            )));
        }
        Ok(Self {
            tokens,
            vocab_size,
            provenance,
        })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Contiguous split: the first `floor(N·train_fraction)` tokens train, the rest test.
    pub fn split(&self, train_fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Data(format!("train fraction {train_fraction} not in (0, 1)")));
        }
        let cut = (self.len() as f64 * train_fraction).floor() as usize;
        let part = |t: &[u32]| Corpus::new(t.to_vec(), self.vocab_size, self.provenance);
        Ok((part(&self.tokens[..cut])?, part(&self.tokens[cut..])?))
    }
}

/// One token per byte, vocabulary 256.
pub fn tokenize_bytes(bytes: &[u8]) -> Result<Corpus> {
    if bytes.is_empty() {
        return Err(Error::Data("cannot tokenize empty input".into()));
    }
    if bytes.len() < 2 {
        return Err(Error::Data("byte input must hold at least 2 bytes".into()));
    }
    Corpus::new(bytes.iter().map(|&b| b as u32).collect(), 256, Provenance::File)
}

pub fn detokenize(corpus: &Corpus) -> Result<Vec<u8>> {
    corpus
        .tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| Error::Data(format!("token {t} is not a byte"))))
        .collect()
}

/// Markov source of a given order over `vocab_size` symbols.
///
/// Row `s` of `transitions` is the next-token distribution after the context
/// whose tokens, read as base-`vocab_size` digits (oldest first), spell `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSpec {
    pub order: usize,
    pub transitions: Vec<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

impl MarkovSpec {
    pub fn new(order: usize, transitions: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let spec = Self {
            order,
            transitions,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Deterministic `0 → 1 → … → n−1 → 0` cycle.
    pub fn cycle(n: usize, seed: u64) -> Result<Self> {
        let rows = (0..n)
            .map(|s| (0..n).map(|t| if t == (s + 1) % n { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(1, rows, seed)
    }

    /// I.i.d. uniform symbols (order 0).
    pub fn uniform(n: usize, seed: u64) -> Result<Self> {
        Self::new(0, vec![vec![1.0 / n as f64; n]], seed)
    }

    /// Two symbols that repeat with probability `stay`.
    pub fn two_state(stay: f64, seed: u64) -> Result<Self> {
        Self::new(1, vec![vec![stay, 1.0 - stay], vec![1.0 - stay, stay]], seed)
    }

    pub fn vocab_size(&self) -> usize {
        self.transitions.first().map_or(0, Vec::len)
    }

    pub fn num_states(&self) -> usize {
        self.vocab_size().saturating_pow(self.order as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size();
        if v == 0 {
            return Err(Error::Data("markov table is empty".into()));
        }
        let states = (v as u128).checked_pow(self.order as u32).unwrap_or(u128::MAX);
        if states > MAX_MARKOV_STATES as u128 {
            return Err(Error::Data(format!("markov source has {states} states, limit {MAX_MARKOV_STATES}")));
        }
        if self.transitions.len() as u128 != states {
            return Err(Error::Data(format!(
                "order {} over {v} symbols needs {states} rows, got {}",
                self.order,
                self.transitions.len()
            )));
        }
        for (s, row) in self.transitions.iter().enumerate() {
            if row.len() != v {
                return Err(Error::Data(format!("row {s} has {} entries, expected {v}", row.len())));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Data(format!("row {s} has a negative or non-finite probability")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Data(format!("row {s} sums to {sum}, not 1")));
            }
        }
        Ok(())
    }

    fn next_state(&self, state: usize, token: usize) -> usize {
        if self.order == 0 {
            0
        } else {
            (state * self.vocab_size() + token) % self.num_states()
        }
    }

    /// Stationary distribution over contexts, by power iteration on the lazy
    /// chain `(P + I)/2` (same fixed points, no periodic oscillation).
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.num_states();
        let mut pi = vec![1.0 / n as f64; n];
        let mut next = vec![0.0; n];
        for _ in 0..1_000_000 {
            next.iter_mut().zip(&pi).for_each(|(a, p)| *a = 0.5 * p);
            for (s, row) in self.transitions.iter().enumerate() {
                for (t, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        next[self.next_state(s, t)] += 0.5 * pi[s] * p;
                    }
                }
            }
            let total: f64 = next.iter().sum();
            let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a / total - b).abs()).sum();
            for (p, a) in pi.iter_mut().zip(&next) {
                *p = a / total;
            }
            if diff < 1e-14 {
                break;
            }
        }
        pi
    }

    /// `−Σ_s π(s) Σ_t p(t|s) log p(t|s)` in nats per token.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        -pi.iter()
            .zip(&self.transitions)
            .map(|(w, row)| w * row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
    }
}

fn sample(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Samples `length` tokens; the opening context is drawn from the stationary distribution.
pub fn gen_markov_corpus(spec: &MarkovSpec, length: usize) -> Result<Corpus> {
    spec.validate()?;
    if length < spec.order + 1 {
        return Err(Error::Data(format!("length {length} must exceed the order {}", spec.order)));
    }
    let v = spec.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut state = sample(&mut rng, &spec.stationary());
    let mut tokens = Vec::with_capacity(length);
    let mut digits = state;
    let mut opening = vec![0u32; spec.order];
    for slot in opening.iter_mut().rev() {
        *slot = (digits % v) as u32;
        digits /= v;
    }
    tokens.extend_from_slice(&opening);
    while tokens.len() < length {
        let t = sample(&mut rng, &spec.transitions[state]);
        tokens.push(t as u32);
        state = spec.next_state(state, t);
    }
    Corpus::new(tokens, v, Provenance::Synthetic)
}

/// Plug-in conditional entropy of the next token given the previous `order` tokens.
pub fn empirical_entropy_rate(corpus: &Corpus, order: usize) -> f64 {
    use std::collections::HashMap;
    let toks = corpus.tokens();
    let mut counts: HashMap<&[u32], HashMap<u32, u64>> = HashMap::new();
    for i in order..toks.len() {
        *counts.entry(&toks[i - order..i]).or_default().entry(toks[i]).or_default() += 1;
    }
    let total = (toks.len() - order) as f64;
    let mut h = 0.0;
    for next in counts.values() {
        let n: u64 = next.values().sum();
        for &c in next.values() {
            h -= c as f64 / total * (c as f64 / n as f64).ln();
        }
    }
    h
}

pub fn write_token_file(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * corpus.len());
    buf.extend_from_slice(TOKEN_FILE_MAGIC);
    buf.extend_from_slice(&(corpus.vocab_size as u32).to_le_bytes());
    for &t in &corpus.tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_token_file(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_token_file(path, &bytes)
}

fn parse_token_file(path: &Path, bytes: &[u8]) -> Result<Corpus> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..8] != TOKEN_FILE_MAGIC {
        return Err(bad("missing LETTOK01 header".into()));
    }
    if (bytes.len() - 12) % 4 != 0 {
        return Err(bad("token payload is not a whole number of u32 values".into()));
    }
    let vocab = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let tokens = bytes[12..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Corpus::new(tokens, vocab, Provenance::File).map_err(|e| bad(e.to_string()))
}

/// Reads a token file, or tokenizes any other file as raw bytes.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(TOKEN_FILE_MAGIC) {
        parse_token_file(path, &bytes)
    } else {
        tokenize_bytes(&bytes)
    }
}

/// `batch_size × seq_len` inputs and their next-token targets, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl TokenBatch {
    fn from_windows(corpus: &Corpus, starts: impl Iterator<Item = usize>, seq_len: usize) -> Self {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut batch_size = 0;
        for s in starts {
            inputs.extend_from_slice(&corpus.tokens[s..s + seq_len]);
            targets.extend_from_slice(&corpus.tokens[s + 1..s + seq_len + 1]);
            batch_size += 1;
        }
        Self {
            batch_size,
            seq_len,
            inputs,
            targets,
        }
    }
}

/// Position in a batch stream: epoch and batch index within it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCursor {
    pub epoch: u64,
    pub index: u64,
}

/// Endless stream of training batches over shuffled, non-overlapping windows.
///
/// Each epoch uses the first `B·nb` windows of length `T`, where
/// `nb = floor((N−1)/(B·T))`, in an order fixed by `(seed, epoch)`.
pub struct Batches<'a> {
    corpus: &'a Corpus,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    per_epoch: usize,
    order: Vec<usize>,
    order_epoch: Option<u64>,
    cursor: BatchCursor,
}

impl<'a> Batches<'a> {
    pub fn new(corpus: &'a Corpus, batch_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 {
            return Err(Error::Data("batch_size and seq_len must be positive".into()));
        }
        if corpus.len() <= seq_len {
            return Err(Error::Data(format!(
                "corpus of {} tokens is shorter than one window of {seq_len}",
                corpus.len()
            )));
        }
        let per_epoch = (corpus.len() - 1) / (batch_size * seq_len);
        if per_epoch == 0 {
            return Err(Error::Data(format!(
                "corpus of {} tokens cannot fill one batch of {batch_size}×{seq_len}",
                corpus.len()
            )));
        }
        Ok(Self {
            corpus,
            batch_size,
            seq_len,
            seed,
            per_epoch,
            order: Vec::new(),
            order_epoch: None,
            cursor: BatchCursor::default(),
        })
    }

    pub fn with_cursor(mut self, cursor: BatchCursor) -> Self {
        self.cursor = cursor;
        self
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.per_epoch
    }

    pub fn cursor(&self) -> BatchCursor {
        self.cursor
    }

    fn ensure_order(&mut self) {
        if self.order_epoch == Some(self.cursor.epoch) {
            return;
        }
        let mut order: Vec<usize> = (0..self.per_epoch * self.batch_size).collect();
        let mut rng = seeding::rng(self.seed, &format!("shuffle/{}", self.cursor.epoch));
        order.shuffle(&mut rng);
        self.order = order;
        self.order_epoch = Some(self.cursor.epoch);
    }

    pub fn next_batch(&mut self) -> TokenBatch {
        self.ensure_order();
        let b = self.cursor.index as usize;
        let windows = &self.order[b * self.batch_size..(b + 1) * self.batch_size];
        let batch = TokenBatch::from_windows(self.corpus, windows.iter().map(|w| w * self.seq_len), self.seq_len);
        self.cursor.index += 1;
        if self.cursor.index as usize == self.per_epoch {
            self.cursor = BatchCursor {
                epoch: self.cursor.epoch + 1,
                index: 0,
            };
        }
        batch
    }
}

impl Iterator for Batches<'_> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        Some(self.next_batch())
    }
}

/// Every full window of length `seq_len` in corpus order, grouped into
/// batches of at most `batch_size` (the last batch may be smaller).
pub fn sequential_batches(corpus: &Corpus, batch_size: usize, seq_len: usize) -> Result<Vec<TokenBatch>> {
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::Data("batch_size and seq_len must be positive".into()));
    }
    let windows = (corpus.len() - 1) / seq_len;
    if windows == 0 {
        return Err(Error::Data(format!(
            "corpus of {} tokens is shorter than one window of {seq_len}",
            corpus.len()
        )));
    }
    Ok((0..windows)
        .step_by(batch_size)
        .map(|first| {
            let last = (first + batch_size).min(windows);
            TokenBatch::from_windows(corpus, (first..last).map(|w| w * seq_len), seq_len)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_map_to_ids() {
        let c = tokenize_bytes(b"Hi").unwrap();
        assert_eq!(c.tokens(), &[72, 105]);
        assert_eq!(c.vocab_size(), 256);
        assert!(tokenize_bytes(b"").is_err());
    }

    #[test]
    fn corpus_rejects_out_of_range_ids() {
        assert!(Corpus::new(vec![0, 3], 3, Provenance::File).is_err());
        assert!(Corpus::new(vec![0], 3, Provenance::File).is_err());
    }

    #[test]
    fn bad_rows_rejected() {
        assert!(MarkovSpec::new(1, vec![vec![0.5, 0.6], vec![0.5, 0.5]], 0).is_err());
        assert!(MarkovSpec::new(1, vec![vec![1.0, 0.0]], 0).is_err());
        assert!(MarkovSpec::new(1, vec![vec![1.5, -0.5], vec![0.5, 0.5]], 0).is_err());
    }

    #[test]
    fn split_is_contiguous() {
        let c = Corpus::new((0..20).map(|i| i % 4).collect(), 4, Provenance::Synthetic).unwrap();
        let (a, b) = c.split(0.9).unwrap();
        assert_eq!((a.len(), b.len()), (18, 2));
        assert_eq!([a.tokens(), b.tokens()].concat(), c.tokens());
        assert!(c.split(0.95).is_err());
        assert!(c.split(1.0).is_err());
    }

    #[test]
    fn short_corpus_fails_batching() {
        let c = Corpus::new(vec![0; 64], 2, Provenance::Synthetic).unwrap();
        assert!(Batches::new(&c, 1, 64, 0).is_err());
        assert!(Batches::new(&c, 2, 32, 0).is_err());
        assert!(Batches::new(&c, 1, 32, 0).is_ok());
    }
}
