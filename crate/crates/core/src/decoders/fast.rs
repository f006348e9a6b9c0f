//! Frequency-domain action tokenizer: per-dimension DCT over the chunk's
//! time axis, scalar quantisation, then byte-pair merges over the symbol
//! stream.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{dct, idct, Tensor2};

use super::chunk::ActionChunk;

pub const DEFAULT_QUANT_SCALE: f64 = 64.0;
pub const DEFAULT_BASE_VOCAB: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub new: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FastTokenizer {
    pub quant_scale: f64,
    pub base_vocab: usize,
    /// Added to every token id to place it in the model vocabulary.
    pub special_offset: usize,
    pub merges: Vec<Merge>,
}

impl FastTokenizer {
    pub fn new(quant_scale: f64, base_vocab: usize, special_offset: usize) -> Result<Self> {
        if !(quant_scale > 0.0) || !quant_scale.is_finite() {
            return Err(Error::Tokenizer(format!("quant_scale must be positive, got {quant_scale}")));
        }
        if base_vocab < 2 {
            return Err(Error::Tokenizer("base_vocab must be at least 2".into()));
        }
        Ok(Self { quant_scale, base_vocab, special_offset, merges: Vec::new() })
    }

    /// Tokens this tokenizer can emit (base symbols plus merges), before the offset.
    pub fn vocab_size(&self) -> usize {
        self.base_vocab + self.merges.len()
    }

    fn zero_symbol(&self) -> i64 {
        (self.base_vocab / 2) as i64
    }

    /// Quantised DCT symbols, frequency-major (`for f { for dim }`).
    pub fn symbols(&self, chunk: &ActionChunk) -> Result<Vec<usize>> {
        let (steps, dims) = chunk.values.shape();
        let mut coeffs = Vec::with_capacity(dims);
        for d in 0..dims {
            let col: Vec<f64> = (0..steps).map(|t| chunk.values.get(t, d)).collect();
            coeffs.push(dct(&col)?);
        }
        let mut out = Vec::with_capacity(steps * dims);
        for f in 0..steps {
            for c in &coeffs {
                let q = (c[f] * self.quant_scale).round() as i64;
                let s = q + self.zero_symbol();
                if s < 0 || s >= self.base_vocab as i64 {
                    return Err(Error::Tokenizer(format!(
                        "quantised coefficient {q} outside the base vocabulary of {}",
                        self.base_vocab
                    )));
                }
                out.push(s as usize);
            }
        }
        Ok(out)
    }

    /// Inverse of [`symbols`](Self::symbols) up to quantisation.
    pub fn from_symbols(&self, symbols: &[usize], steps: usize, dims: usize) -> Result<ActionChunk> {
        if symbols.len() != steps * dims || steps == 0 {
            return Err(Error::Decode(format!(
                "{} coefficients for a {steps}x{dims} chunk",
                symbols.len()
            )));
        }
        let mut out = Tensor2::zeros(steps, dims);
        for d in 0..dims {
            let coeffs: Vec<f64> = (0..steps)
                .map(|f| (symbols[f * dims + d] as i64 - self.zero_symbol()) as f64 / self.quant_scale)
                .collect();
            for (t, v) in idct(&coeffs)?.into_iter().enumerate() {
                out.set(t, d, v);
            }
        }
        ActionChunk::new(out)
    }

    /// Applies the merges in creation order.
    pub fn compress(&self, symbols: &[usize]) -> Vec<usize> {
        let mut seq = symbols.to_vec();
        for m in &self.merges {
            seq = apply_merge(&seq, m);
        }
        seq
    }

    pub fn expand(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(tokens.len() * 2);
        let mut stack = Vec::new();
        for &t in tokens.iter().rev() {
            stack.push(t);
        }
        while let Some(t) = stack.pop() {
            if t < self.base_vocab {
                out.push(t);
            } else if let Some(m) = self.merges.get(t - self.base_vocab) {
                stack.push(m.right);
                stack.push(m.left);
            } else {
                return Err(Error::Decode(format!("unknown token {t}")));
            }
        }
        Ok(out)
    }

    /// Number of base symbols each token expands to.
    pub fn expansion_lengths(&self) -> Vec<usize> {
        let mut len = vec![1; self.vocab_size()];
        for (i, m) in self.merges.iter().enumerate() {
            len[self.base_vocab + i] = len[m.left] + len[m.right];
        }
        len
    }

    /// Model-vocabulary ids for a chunk.
    pub fn encode(&self, chunk: &ActionChunk) -> Result<Vec<usize>> {
        let s = self.symbols(chunk)?;
        Ok(self.compress(&s).into_iter().map(|t| t + self.special_offset).collect())
    }

    pub fn decode(&self, ids: &[usize], steps: usize, dims: usize) -> Result<ActionChunk> {
        let mut tokens = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < self.special_offset || id - self.special_offset >= self.vocab_size() {
                return Err(Error::Decode(format!("id {id} outside the action vocabulary")));
            }
            tokens.push(id - self.special_offset);
        }
        let symbols = self.expand(&tokens)?;
        self.from_symbols(&symbols, steps, dims)
    }

    /// Learns up to `target_merges` merges from the symbol streams of `chunks`.
    pub fn fit(&mut self, chunks: &[ActionChunk], target_merges: usize) -> Result<()> {
        let corpus = chunks.iter().map(|c| self.symbols(c)).collect::<Result<Vec<_>>>()?;
        self.merges = bpe_train(&corpus, target_merges, self.base_vocab);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "quant_scale {}\nbase_vocab {}\nspecial_offset {}\n",
            self.quant_scale, self.base_vocab, self.special_offset
        );
        for m in &self.merges {
            let _ = writeln!(s, "{} {} → {}", m.left, m.right, m.new);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| Error::Format(format!("missing {key}")))?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.trim().to_string()),
                _ => Err(Error::Format(format!("expected '{key} <value>', got '{line}'"))),
            }
        };
        let bad = |what: &str| Error::Format(format!("bad {what}"));
        let quant_scale = header("quant_scale")?.parse().map_err(|_| bad("quant_scale"))?;
        let base_vocab = header("base_vocab")?.parse().map_err(|_| bad("base_vocab"))?;
        let special_offset = header("special_offset")?.parse().map_err(|_| bad("special_offset"))?;
        let mut tok = Self::new(quant_scale, base_vocab, special_offset)?;
        for line in lines {
            let (pair, new) = line
                .split_once('→')
                .or_else(|| line.split_once("->"))
                .ok_or_else(|| Error::Format(format!("bad merge line '{line}'")))?;
            let mut it = pair.split_whitespace();
            let parse = |s: Option<&str>| -> Result<usize> {
                s.and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format(format!("bad merge line '{line}'")))
            };
            let left = parse(it.next())?;
            let right = parse(it.next())?;
            let new = parse(Some(new.trim()))?;
            let expected = tok.vocab_size();
            if new != expected || left >= expected || right >= expected {
                return Err(Error::Format(format!("merge '{line}' is out of order (next id {expected})")));
            }
            tok.merges.push(Merge { left, right, new });
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Replaces non-overlapping occurrences of `(left, right)`, scanning left to right.
pub fn apply_merge(seq: &[usize], m: &Merge) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == m.left && seq[i + 1] == m.right {
            out.push(m.new);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

fn add_pairs(seq: &[usize], delta: i64, counts: &mut BTreeMap<(usize, usize), i64>) {
    for p in seq.windows(2) {
        let e = counts.entry((p[0], p[1])).or_insert(0);
        *e += delta;
        if *e == 0 {
            counts.remove(&(p[0], p[1]));
        }
    }
}

/// Byte-pair merges: repeatedly merge the adjacent pair with the highest
/// count over all positions (ties to the smallest pair), numbering new
/// tokens from `first_id`. Stops at `target_merges` or when no pair occurs
/// twice.
///
/// Pair counts are maintained incrementally: only sequences touched by a
/// merge are re-counted.
pub fn bpe_train(corpus: &[Vec<usize>], target_merges: usize, first_id: usize) -> Vec<Merge> {
    let mut seqs: Vec<Vec<usize>> = corpus.to_vec();
    let mut counts = BTreeMap::new();
    let mut where_: HashMap<(usize, usize), HashSet<usize>> = HashMap::new();
    for (i, s) in seqs.iter().enumerate() {
        add_pairs(s, 1, &mut counts);
        for p in s.windows(2) {
            where_.entry((p[0], p[1])).or_default().insert(i);
        }
    }
    let mut merges = Vec::new();
    while merges.len() < target_merges {
        let mut best: Option<((usize, usize), i64)> = None;
        for (&pair, &c) in &counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some(((left, right), c)) = best else { break };
        if c < 2 {
            break;
        }
        let m = Merge { left, right, new: first_id + merges.len() };
        let mut touched: Vec<usize> = where_.remove(&(left, right)).unwrap_or_default().into_iter().collect();
        touched.sort_unstable();
        for i in touched {
            let old = &seqs[i];
            if !old.windows(2).any(|p| p[0] == left && p[1] == right) {
                continue;
            }
            let new = apply_merge(old, &m);
            add_pairs(old, -1, &mut counts);
            add_pairs(&new, 1, &mut counts);
            for p in new.windows(2) {
                where_.entry((p[0], p[1])).or_default().insert(i);
            }
            seqs[i] = new;
        }
        merges.push(m);
    }
    merges
}
