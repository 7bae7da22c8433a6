//! Corpus ingestion, vocabularies, batching, and synthetic tasks.
//!
//! Everything here is deterministic given (file bytes, config, seed): vocab
//! ids are assigned by frequency with lexicographic tie-breaks, language
//! modeling batches traverse the corpus sequentially in fixed lane strips,
//! and the synthetic generators draw from the seedable [`Rng`].

use crate::numerics::Rng;
use crate::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

/// Tokenization granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabLevel {
    Char,
    Word,
}

/// Token/id mapping with dense ids from 0.
///
/// Word-level vocabularies reserve id 0 for the unknown token; char-level
/// vocabularies contain every distinct character of the corpus they were
/// built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    unk: Option<u32>,
    pad: Option<u32>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn unk(&self) -> Option<u32> {
        self.unk
    }

    pub fn pad(&self) -> Option<u32> {
        self.pad
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Rebuild the lookup structures from an id-ordered token list (used by
    /// checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>, unk: Option<u32>) -> Self {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token: tokens,
            unk,
            pad: None,
        }
    }

    /// Encode char-level text. Unknown characters are a data error.
    pub fn encode_chars(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                let s = c.to_string();
                self.id_of(&s)
                    .ok_or_else(|| Error::Data(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Encode an already-tokenized word sequence, mapping misses to UNK.
    pub fn encode_words(&self, words: &[String]) -> Vec<u32> {
        let unk = self.unk.unwrap_or(0);
        words.iter().map(|w| self.id_of(w).unwrap_or(unk)).collect()
    }

    pub fn decode(&self, ids: &[u32], level: VocabLevel) -> String {
        let parts: Vec<&str> = ids.iter().filter_map(|&id| self.token_of(id)).collect();
        match level {
            VocabLevel::Char => parts.concat(),
            VocabLevel::Word => parts.join(" "),
        }
    }

    /// Dump tokens one per line in id order, control characters escaped.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.id_to_token {
            for c in t.chars() {
                if c.is_control() {
                    out.extend(c.escape_default());
                } else {
                    out.push(c);
                }
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Lowercase whitespace tokenization with punctuation stripped from token
/// edges.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let t: String = raw
                .to_lowercase()
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_string();
            (!t.is_empty()).then_some(t)
        })
        .collect()
}

/// Build a vocabulary. Char level keeps every distinct character; word level
/// keeps the `max_size - 1` most frequent tokens plus UNK. Ordering is by
/// descending frequency with lexicographic tie-break, so construction is
/// deterministic.
pub fn build_vocab(corpus: &str, level: VocabLevel, max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    match level {
        VocabLevel::Char => {
            for c in corpus.chars() {
                *counts.entry(c.to_string()).or_default() += 1;
            }
        }
        VocabLevel::Word => {
            for w in tokenize_words(corpus) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("corpus has no tokens".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut id_to_token = Vec::new();
    let unk = match level {
        VocabLevel::Char => None,
        VocabLevel::Word => {
            id_to_token.push(UNK_TOKEN.to_string());
            Some(0)
        }
    };
    let budget = match level {
        VocabLevel::Char => ranked.len(),
        VocabLevel::Word => max_size.saturating_sub(id_to_token.len()),
    };
    for (tok, _) in ranked.into_iter().take(budget) {
        id_to_token.push(tok);
    }
    Ok(Vocabulary::from_tokens(id_to_token, unk))
}

// ---------------------------------------------------------------------------
// Language-model batching
// ---------------------------------------------------------------------------

/// Sequential state-carrying batch layout: the corpus is split into
/// `batch_size` contiguous lane strips, and batch `k` exposes tokens
/// `[k*T, k*T + T)` of every lane with targets shifted by one. Consecutive
/// batches are adjacent in the text, so carrying the final hidden state into
/// the next batch is meaningful. The trailing remainder of each strip is
/// dropped.
#[derive(Debug, Clone)]
pub struct LmBatchStream {
    ids: Vec<u32>,
    batch_size: usize,
    unroll: usize,
    strip: usize,
}

/// One minibatch of the stream.
#[derive(Debug, Clone)]
pub struct LmBatch {
    /// `batch_size` rows of `unroll` input ids.
    pub inputs: Vec<Vec<u32>>,
    /// Same shape, shifted one token ahead.
    pub targets: Vec<Vec<u32>>,
    /// False only for the first batch of an epoch (fresh zero state).
    pub carry: bool,
}

impl LmBatchStream {
    pub fn new(ids: Vec<u32>, batch_size: usize, unroll: usize) -> Result<Self> {
        if batch_size == 0 || unroll == 0 {
            return Err(Error::Config(
                "batch size and unroll must be positive".into(),
            ));
        }
        if ids.len() < batch_size * (unroll + 1) {
            return Err(Error::Data(format!(
                "corpus of {} tokens is too short for batch {} x unroll {}",
                ids.len(),
                batch_size,
                unroll
            )));
        }
        let strip = ids.len() / batch_size;
        Ok(LmBatchStream {
            ids,
            batch_size,
            unroll,
            strip,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_batches(&self) -> usize {
        (self.strip - 1) / self.unroll
    }

    /// Total supervised predictions per epoch.
    pub fn predictions_per_epoch(&self) -> usize {
        self.num_batches() * self.batch_size * self.unroll
    }

    pub fn batches(&self) -> impl Iterator<Item = LmBatch> + '_ {
        (0..self.num_batches()).map(move |k| {
            let t = self.unroll;
            let mut inputs = Vec::with_capacity(self.batch_size);
            let mut targets = Vec::with_capacity(self.batch_size);
            for lane in 0..self.batch_size {
                let base = lane * self.strip + k * t;
                inputs.push(self.ids[base..base + t].to_vec());
                targets.push(self.ids[base + 1..base + t + 1].to_vec());
            }
            LmBatch {
                inputs,
                targets,
                carry: k > 0,
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Classification data
// ---------------------------------------------------------------------------

/// Labeled token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSet {
    pub examples: Vec<(Vec<u32>, u32)>,
    pub n_classes: usize,
    pub split: String,
}

impl ClassificationSet {
    pub fn new(examples: Vec<(Vec<u32>, u32)>, n_classes: usize, split: impl Into<String>) -> Self {
        ClassificationSet {
            examples,
            n_classes,
            split: split.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.examples
            .iter()
            .map(|(s, _)| s.len())
            .max()
            .unwrap_or(0)
    }
}

/// Load `label<TAB>text` lines. Text is word-tokenized through the given
/// vocabulary (misses to UNK); sequences that tokenize to nothing become a
/// single UNK.
pub fn load_classification_tsv(path: &Path, vocab: &Vocabulary) -> Result<ClassificationSet> {
    let raw = std::fs::read_to_string(path)?;
    let mut examples = Vec::new();
    let mut max_label = 0u32;
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let (label_str, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("line {line_no}: expected `label<TAB>text`")))?;
        let label: u32 = label_str.trim().parse().map_err(|_| {
            Error::Data(format!(
                "line {line_no}: label {label_str:?} is not an integer"
            ))
        })?;
        let mut ids = vocab.encode_words(&tokenize_words(text));
        if ids.is_empty() {
            ids.push(vocab.unk().unwrap_or(0));
        }
        max_label = max_label.max(label);
        examples.push((ids, label));
    }
    if examples.is_empty() {
        return Err(Error::Data(format!("{}: no examples", path.display())));
    }
    Ok(ClassificationSet::new(
        examples,
        max_label as usize + 1,
        "file",
    ))
}

/// Deterministic validation split by hash of example index: an example goes
/// to the held-out set iff `splitmix64(index) mod 10^6 < fraction * 10^6`.
pub fn split_by_index_hash(
    set: &ClassificationSet,
    fraction: f64,
) -> (ClassificationSet, ClassificationSet) {
    let threshold = (fraction.clamp(0.0, 1.0) * 1_000_000.0) as u64;
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for (i, ex) in set.examples.iter().enumerate() {
        if splitmix64(i as u64) % 1_000_000 < threshold {
            held.push(ex.clone());
        } else {
            kept.push(ex.clone());
        }
    }
    (
        ClassificationSet::new(kept, set.n_classes, set.split.clone()),
        ClassificationSet::new(held, set.n_classes, "val"),
    )
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

/// Sequences over `vocab` tokens where only `token_a` and `token_b` carry
/// signal: the label says whether `token_a` occurs before `token_b`. Each
/// sequence contains exactly one of each at random distinct positions; every
/// other position is uniform noise over the remaining tokens.
#[derive(Debug, Clone)]
pub struct SparseSignalParams {
    pub vocab: usize,
    pub seq_len: usize,
    pub token_a: u32,
    pub token_b: u32,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SparseSignalParams {
    fn default() -> Self {
        SparseSignalParams {
            vocab: 32,
            seq_len: 20,
            token_a: 2,
            token_b: 5,
            n_train: 2000,
            n_val: 300,
            n_test: 1000,
        }
    }
}

/// Train/val/test splits of the sparse-signal task.
pub fn sparse_signal(
    params: &SparseSignalParams,
    rng: &mut Rng,
) -> (ClassificationSet, ClassificationSet, ClassificationSet) {
    let gen_split = |n: usize, split: &str, rng: &mut Rng| {
        let mut examples = Vec::with_capacity(n);
        for _ in 0..n {
            examples.push(sparse_signal_example(params, rng));
        }
        ClassificationSet::new(examples, 2, split)
    };
    let train = gen_split(params.n_train, "train", rng);
    let val = gen_split(params.n_val, "val", rng);
    let test = gen_split(params.n_test, "test", rng);
    (train, val, test)
}

fn sparse_signal_example(params: &SparseSignalParams, rng: &mut Rng) -> (Vec<u32>, u32) {
    let t = params.seq_len;
    let pos_a = rng.below(t);
    let pos_b = loop {
        let p = rng.below(t);
        if p != pos_a {
            break p;
        }
    };
    let noise: Vec<u32> = (0..params.vocab as u32)
        .filter(|&v| v != params.token_a && v != params.token_b)
        .collect();
    let mut seq = Vec::with_capacity(t);
    for pos in 0..t {
        if pos == pos_a {
            seq.push(params.token_a);
        } else if pos == pos_b {
            seq.push(params.token_b);
        } else {
            seq.push(noise[rng.below(noise.len())]);
        }
    }
    let label = u32::from(pos_a < pos_b);
    (seq, label)
}

/// Binary sequences labeled by the parity of their ones.
pub fn parity(
    seq_len: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    rng: &mut Rng,
) -> (ClassificationSet, ClassificationSet, ClassificationSet) {
    let gen_split = |n: usize, split: &str, rng: &mut Rng| {
        let mut examples = Vec::with_capacity(n);
        for _ in 0..n {
            let seq: Vec<u32> = (0..seq_len).map(|_| rng.below(2) as u32).collect();
            let label = seq.iter().sum::<u32>() % 2;
            examples.push((seq, label));
        }
        ClassificationSet::new(examples, 2, split)
    };
    (
        gen_split(n_train, "train", rng),
        gen_split(n_val, "val", rng),
        gen_split(n_test, "test", rng),
    )
}

/// Character corpus where the character at `t` depends on the character at
/// `t - lag`: it repeats it with probability `p_copy` and is uniform noise
/// otherwise. The alphabet is the first `alphabet` lowercase letters.
#[derive(Debug, Clone)]
pub struct CopyMemoryParams {
    pub alphabet: usize,
    pub lag: usize,
    pub len: usize,
    pub p_copy: f64,
}

impl Default for CopyMemoryParams {
    fn default() -> Self {
        CopyMemoryParams {
            alphabet: 26,
            lag: 7,
            len: 200_000,
            p_copy: 0.85,
        }
    }
}

pub fn copy_memory(params: &CopyMemoryParams, rng: &mut Rng) -> String {
    assert!(params.alphabet >= 2 && params.alphabet <= 26);
    let letter = |k: usize| (b'a' + k as u8) as char;
    let mut chars: Vec<char> = Vec::with_capacity(params.len);
    for t in 0..params.len {
        let c = if t >= params.lag && rng.uniform() < params.p_copy {
            chars[t - params.lag]
        } else {
            letter(rng.below(params.alphabet))
        };
        chars.push(c);
    }
    chars.into_iter().collect()
}
