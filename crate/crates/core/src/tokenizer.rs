//! Byte-level BPE tokenizer: trainer, codec and the `bpe-v1` vocab file.
//!
//! Ids `0..4` are the specials (PAD, BOS, EOS, IMG), ids `4..260` are the 256
//! raw bytes, and every id from 260 on is the result of one merge, in
//! training order.
//!
//! Text is pre-split into chunks at every whitespace byte that follows a
//! non-whitespace byte, so each chunk is a run of whitespace followed by a run
//! of non-whitespace (`"a  b\n"` → `"a"`, `"  b"`, `"\n"`). Merges never cross
//! a chunk boundary.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const IMG: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
pub const BYTE_OFFSET: u32 = NUM_SPECIALS as u32;
/// Specials plus the 256 byte tokens.
pub const BASE_VOCAB: usize = NUM_SPECIALS + 256;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<img>"];

/// Token ids produced by the tokenizer.
pub type TokenSequence = Vec<u32>;

/// A trained byte-level BPE vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeVocab {
    vocab_size: usize,
    merges: Vec<(u32, u32)>,
    /// Byte string for every non-special id (specials hold an empty vec).
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    ranks: HashMap<(u32, u32), u32>,
}

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIALS
}

fn is_ws(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Splits bytes into whitespace-prefixed chunks.
pub fn pretokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let mut chunks = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        if is_ws(bytes[i]) && !is_ws(bytes[i - 1]) {
            chunks.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        chunks.push(&bytes[start..]);
    }
    chunks
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap: higher count first, then lexicographically smaller pair
        self.count
            .cmp(&other.count)
            .then_with(|| Reverse((&self.left, &self.right)).cmp(&Reverse((&other.left, &other.right))))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl BpeVocab {
    fn with_base() -> Self {
        let mut tokens = vec![Vec::new(); NUM_SPECIALS];
        let mut token_to_id = HashMap::new();
        for b in 0..=255u8 {
            token_to_id.insert(vec![b], tokens.len() as u32);
            tokens.push(vec![b]);
        }
        Self {
            vocab_size: BASE_VOCAB,
            merges: Vec::new(),
            tokens,
            token_to_id,
            ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> Result<u32> {
        let mut bytes = self
            .tokens
            .get(pair.0 as usize)
            .filter(|_| !is_special(pair.0))
            .ok_or(Error::UnknownToken(pair.0))?
            .clone();
        bytes.extend_from_slice(
            self.tokens
                .get(pair.1 as usize)
                .filter(|_| !is_special(pair.1))
                .ok_or(Error::UnknownToken(pair.1))?,
        );
        if self.token_to_id.contains_key(&bytes) {
            return Err(Error::config(format!(
                "merge {pair:?} duplicates existing token {:?}",
                String::from_utf8_lossy(&bytes)
            )));
        }
        let id = self.tokens.len() as u32;
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        self.token_to_id.insert(bytes.clone(), id);
        self.tokens.push(bytes);
        self.vocab_size = self.tokens.len();
        Ok(id)
    }

    /// Learns `vocab_size - 260` merges from the documents in order.
    ///
    /// Each step merges the most frequent adjacent pair; equal counts go to
    /// the pair whose (left bytes, right bytes) is lexicographically smallest.
    /// Pairs whose concatenation already exists as a token are never merged,
    /// which keeps the id ↔ bytes maps bijective.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        if vocab_size <= BASE_VOCAB {
            return Err(Error::config(format!(
                "vocab_size {vocab_size} must exceed the {BASE_VOCAB} specials and byte tokens"
            )));
        }
        if corpus.iter().all(|d| d.as_ref().is_empty()) {
            return Err(Error::config("cannot train a tokenizer on an empty corpus"));
        }
        let mut chunk_counts: BTreeMap<&[u8], u64> = BTreeMap::new();
        for doc in corpus {
            for c in pretokenize(doc.as_ref().as_bytes()) {
                *chunk_counts.entry(c).or_default() += 1;
            }
        }
        let mut words: Vec<Vec<u32>> = Vec::with_capacity(chunk_counts.len());
        let mut freq: Vec<u64> = Vec::with_capacity(chunk_counts.len());
        for (c, n) in chunk_counts {
            words.push(c.iter().map(|&b| b as u32 + BYTE_OFFSET).collect());
            freq.push(n);
        }

        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (w, syms) in words.iter().enumerate() {
            for p in syms.windows(2) {
                let pair = (p[0], p[1]);
                *pair_counts.entry(pair).or_default() += freq[w];
                pair_words.entry(pair).or_default().insert(w);
            }
        }

        let mut vocab = Self::with_base();
        let candidate = |vocab: &Self, pair: (u32, u32), count: u64| Candidate {
            count,
            left: vocab.tokens[pair.0 as usize].clone(),
            right: vocab.tokens[pair.1 as usize].clone(),
            pair,
        };
        let mut heap: BinaryHeap<Candidate> = pair_counts
            .iter()
            .map(|(&p, &c)| candidate(&vocab, p, c))
            .collect();

        let target = vocab_size - BASE_VOCAB;
        while vocab.merges.len() < target {
            let Some(top) = heap.pop() else {
                return Err(Error::config(format!(
                    "corpus supports only {} merges, vocab_size {vocab_size} needs {target}",
                    vocab.merges.len()
                )));
            };
            let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
            if current == 0 {
                continue;
            }
            if current != top.count {
                heap.push(candidate(&vocab, top.pair, current));
                continue;
            }
            let mut joined = top.left.clone();
            joined.extend_from_slice(&top.right);
            if vocab.token_to_id.contains_key(&joined) {
                pair_counts.remove(&top.pair);
                continue;
            }
            let new_id = vocab.push_merge(top.pair)?;

            let mut affected: Vec<usize> = pair_words
                .remove(&top.pair)
                .map(|s| s.into_iter().collect())
                .unwrap_or_default();
            affected.sort_unstable();
            let mut touched: HashSet<(u32, u32)> = HashSet::new();
            for w in affected {
                let old = &words[w];
                if !old.windows(2).any(|p| (p[0], p[1]) == top.pair) {
                    continue;
                }
                for p in old.windows(2) {
                    let pair = (p[0], p[1]);
                    if let Some(c) = pair_counts.get_mut(&pair) {
                        *c -= freq[w];
                    }
                    touched.insert(pair);
                }
                let merged = merge_pair(old, top.pair, new_id);
                for p in merged.windows(2) {
                    let pair = (p[0], p[1]);
                    *pair_counts.entry(pair).or_default() += freq[w];
                    pair_words.entry(pair).or_default().insert(w);
                    touched.insert(pair);
                }
                words[w] = merged;
            }
            pair_counts.remove(&top.pair);
            let mut touched: Vec<_> = touched.into_iter().collect();
            touched.sort_unstable();
            for pair in touched {
                match pair_counts.get(&pair).copied() {
                    Some(0) => {
                        pair_counts.remove(&pair);
                    }
                    Some(c) if pair != top.pair => heap.push(candidate(&vocab, pair, c)),
                    _ => {}
                }
            }
        }
        Ok(vocab)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        if is_special(id) {
            return None;
        }
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn special_name(id: u32) -> Option<&'static str> {
        SPECIAL_NAMES.get(id as usize).copied()
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        self.encode_bytes(text.as_bytes())
    }

    /// Applies merges chunk by chunk, always merging the lowest-rank pair
    /// present until none applies.
    pub fn encode_bytes(&self, bytes: &[u8]) -> TokenSequence {
        let mut out = Vec::with_capacity(bytes.len());
        for chunk in pretokenize(bytes) {
            let mut syms: Vec<u32> = chunk.iter().map(|&b| b as u32 + BYTE_OFFSET).collect();
            loop {
                let best = syms
                    .windows(2)
                    .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                    .min();
                let Some((rank, pair)) = best else { break };
                let id = BASE_VOCAB as u32 + rank;
                syms = merge_pair(&syms, pair, id);
            }
            out.extend(syms);
        }
        out
    }

    /// Concatenated token bytes with specials dropped.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if is_special(id) {
                continue;
            }
            let t = self.tokens.get(id as usize).ok_or(Error::UnknownToken(id))?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    /// Decodes to text; invalid UTF-8 (possible only for hand-built id lists)
    /// is replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Serializes to the line-oriented `bpe-v1` format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "bpe-v1 {}", self.vocab_size);
        let _ = writeln!(s, "merges {}", self.merges.len());
        for &(a, b) in &self.merges {
            let _ = writeln!(
                s,
                "{} {}",
                hex::encode(&self.tokens[a as usize]),
                hex::encode(&self.tokens[b as usize])
            );
        }
        let _ = writeln!(s, "specials {NUM_SPECIALS}");
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            let _ = writeln!(s, "{i} {name}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (ln, header) = lines.next().ok_or_else(|| err(1, "empty vocab file"))?;
        let vocab_size: usize = header
            .strip_prefix("bpe-v1 ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(ln, "expected `bpe-v1 <vocab_size>`"))?;
        let (ln, mline) = lines.next().ok_or_else(|| err(2, "missing merges header"))?;
        let n_merges: usize = mline
            .strip_prefix("merges ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(ln, "expected `merges <n>`"))?;
        let mut vocab = Self::with_base();
        for _ in 0..n_merges {
            let (ln, line) = lines.next().ok_or_else(|| err(0, "truncated merge list"))?;
            let (l, r) = line.split_once(' ').ok_or_else(|| err(ln, "expected `<hex> <hex>`"))?;
            let l = hex::decode(l).map_err(|_| err(ln, "bad hex"))?;
            let r = hex::decode(r).map_err(|_| err(ln, "bad hex"))?;
            let (Some(a), Some(b)) = (vocab.token_id(&l), vocab.token_id(&r)) else {
                return Err(err(ln, "merge references an unknown token"));
            };
            vocab.push_merge((a, b)).map_err(|e| err(ln, &e.to_string()))?;
        }
        let (ln, sline) = lines.next().ok_or_else(|| err(0, "missing specials section"))?;
        if sline != format!("specials {NUM_SPECIALS}") {
            return Err(err(ln, "expected `specials 4`"));
        }
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            let (ln, line) = lines.next().ok_or_else(|| err(0, "truncated specials"))?;
            if line != format!("{i} {name}") {
                return Err(err(ln, "unexpected special token entry"));
            }
        }
        if vocab.vocab_size != vocab_size {
            return Err(err(1, "vocab_size disagrees with merge count"));
        }
        Ok(vocab)
    }
}

fn merge_pair(syms: &[u32], pair: (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}
