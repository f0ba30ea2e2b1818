//! Deterministic synthetic corpora with labeled entropy regimes.
//!
//! Two generators ship with the crate: repeated addition items
//! (`Q:a+b=c;`) whose template glyphs are predictable and whose operand
//! digits are not, and letter sequences that alternate between a
//! near-deterministic Markov chain and a near-uniform one. Regime labels are
//! generator-side ground truth, which lets decode-time entropy measurements
//! be scored against what the text actually was.
//!
//! Export format: one document per line in the text file (vocabulary symbols
//! only), plus a sidecar file with one line per document holding
//! space-separated `start-end:R:source` records, where `R` is `L` or `H` and
//! `[start,end)` are token indices.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::TokenSpace;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown character {ch:?} at offset {offset}")]
    UnknownChar { ch: char, offset: usize },
    #[error("token id {id} is not a vocabulary symbol")]
    NotASymbol { id: TokenId },
    #[error("corpus import: line {line}: {msg}")]
    Import { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Entropy regime of a segment, assigned by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    Low,
    High,
}

impl Regime {
    fn tag(self) -> &'static str {
        match self {
            Regime::Low => "L",
            Regime::High => "H",
        }
    }
}

/// Half-open token span with its regime label and generator tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub regime: Regime,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub tokens: Vec<TokenId>,
    pub segments: Vec<Segment>,
}

impl Document {
    /// Regime of the token at `pos`.
    pub fn regime_at(&self, pos: usize) -> Option<Regime> {
        self.segments
            .iter()
            .find(|s| s.start <= pos && pos < s.end)
            .map(|s| s.regime)
    }

    fn check_segments(&self) {
        let mut cursor = 0;
        for s in &self.segments {
            assert_eq!(s.start, cursor, "segments must be contiguous");
            assert!(s.end > s.start, "segments must be non-empty");
            cursor = s.end;
        }
        assert_eq!(cursor, self.tokens.len(), "segments must cover the document");
    }
}

// ── Vocabulary ───────────────────────────────────────────────────────

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const MASK_ID: TokenId = 3;
const FIRST_SYMBOL_ID: TokenId = 4;

const CHARSET: &str = "0123456789abcdefghijklmnopqrstuvwxyzQ:+=;";

/// Character-level vocabulary: four reserved ids (`pad`, `bos`, `eos`, the
/// mask token) followed by the fixed symbol set. Generators never emit the
/// reserved ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    symbols: Vec<char>,
    lookup: HashMap<char, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let symbols: Vec<char> = CHARSET.chars().collect();
        let lookup = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, FIRST_SYMBOL_ID + i as TokenId))
            .collect();
        Vocabulary { symbols, lookup }
    }
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        FIRST_SYMBOL_ID as usize + self.symbols.len()
    }

    pub fn mask_id(&self) -> TokenId {
        MASK_ID
    }

    pub fn pad_id(&self) -> TokenId {
        PAD_ID
    }

    pub fn bos_id(&self) -> TokenId {
        BOS_ID
    }

    pub fn eos_id(&self) -> TokenId {
        EOS_ID
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < FIRST_SYMBOL_ID
    }

    /// Sampling space handed to the corruption process.
    pub fn token_space(&self) -> TokenSpace {
        TokenSpace {
            mask_id: MASK_ID,
            non_special: FIRST_SYMBOL_ID..self.size() as TokenId,
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .enumerate()
            .map(|(offset, ch)| {
                self.lookup
                    .get(&ch)
                    .copied()
                    .ok_or(CorpusError::UnknownChar { ch, offset })
            })
            .collect()
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        tokens
            .iter()
            .map(|&id| {
                if id < FIRST_SYMBOL_ID || (id as usize) >= self.size() {
                    Err(CorpusError::NotASymbol { id })
                } else {
                    Ok(self.symbols[(id - FIRST_SYMBOL_ID) as usize])
                }
            })
            .collect()
    }

    /// Display form that renders reserved ids as markers instead of failing.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&id| match id {
                PAD_ID => "<pad>".to_string(),
                BOS_ID => "<bos>".to_string(),
                EOS_ID => "<eos>".to_string(),
                MASK_ID => "<mask>".to_string(),
                _ if (id as usize) < self.size() => {
                    self.symbols[(id - FIRST_SYMBOL_ID) as usize].to_string()
                }
                _ => format!("<{id}?>"),
            })
            .collect()
    }

    fn char_id(&self, ch: char) -> TokenId {
        self.lookup[&ch]
    }
}

// ── Arithmetic corpus ────────────────────────────────────────────────

/// Repeated `Q:a+b=c;` items. Template glyphs and answer digits are labeled
/// low entropy (the answer is determined by the operands), operand digits
/// high entropy. `digits` bounds the operand magnitude: `a, b < 10^digits`.
pub fn build_arithmetic_corpus(
    vocab: &Vocabulary,
    seed: u64,
    n_docs: usize,
    digits: u32,
) -> Vec<Document> {
    assert!((1..=3).contains(&digits), "digits must be in [1,3]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = 10u64.pow(digits);
    (0..n_docs)
        .map(|_| {
            let n_items = rng.gen_range(4..=8);
            let mut tokens = Vec::new();
            let mut segments = Vec::new();
            let push = |tokens: &mut Vec<TokenId>,
                            segments: &mut Vec<Segment>,
                            text: &str,
                            regime: Regime,
                            source: &str| {
                let start = tokens.len();
                for ch in text.chars() {
                    tokens.push(vocab.char_id(ch));
                }
                segments.push(Segment {
                    start,
                    end: tokens.len(),
                    regime,
                    source: source.to_string(),
                });
            };
            for _ in 0..n_items {
                let a = rng.gen_range(0..limit);
                let b = rng.gen_range(0..limit);
                let c = a + b;
                push(&mut tokens, &mut segments, "Q:", Regime::Low, "template");
                push(&mut tokens, &mut segments, &a.to_string(), Regime::High, "operand");
                push(&mut tokens, &mut segments, "+", Regime::Low, "template");
                push(&mut tokens, &mut segments, &b.to_string(), Regime::High, "operand");
                push(&mut tokens, &mut segments, "=", Regime::Low, "template");
                push(&mut tokens, &mut segments, &c.to_string(), Regime::Low, "answer");
                push(&mut tokens, &mut segments, ";", Regime::Low, "template");
            }
            let doc = Document { tokens, segments };
            doc.check_segments();
            doc
        })
        .collect()
}

// ── Markov corpus ────────────────────────────────────────────────────

pub const MARKOV_STATES: usize = 26;

/// Near-deterministic chain: from letter `i`, go to `i+1` with probability
/// 0.97, else to `i+2`. Per-state entropy ≈ 0.135 nats.
pub fn low_entropy_chain() -> Vec<[f64; MARKOV_STATES]> {
    (0..MARKOV_STATES)
        .map(|i| {
            let mut row = [0.0; MARKOV_STATES];
            row[(i + 1) % MARKOV_STATES] = 0.97;
            row[(i + 2) % MARKOV_STATES] = 0.03;
            row
        })
        .collect()
}

/// Near-uniform chain: one mildly preferred successor (weight 3) against 25
/// others (weight 1 each). Per-state entropy ≈ 3.21 nats.
pub fn high_entropy_chain() -> Vec<[f64; MARKOV_STATES]> {
    (0..MARKOV_STATES)
        .map(|i| {
            let mut row = [1.0; MARKOV_STATES];
            row[(7 * i + 3) % MARKOV_STATES] = 3.0;
            let total: f64 = row.iter().sum();
            for p in row.iter_mut() {
                *p /= total;
            }
            row
        })
        .collect()
}

/// Per-state entropy in nats of a chain whose rows all share one entropy
/// value (true for both shipped chains).
pub fn chain_row_entropy(chain: &[[f64; MARKOV_STATES]]) -> f64 {
    let row = &chain[0];
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

const SEGMENTS_PER_DOC: usize = 6;

/// Letter sequences alternating low- and high-entropy segments of exactly
/// `regime_len` tokens, starting with the low regime. The letter state is
/// continuous across segment boundaries: each token is drawn from the chain
/// of its own segment, conditioned on the previous letter.
pub fn build_markov_corpus(
    vocab: &Vocabulary,
    seed: u64,
    n_docs: usize,
    regime_len: usize,
) -> Vec<Document> {
    assert!(regime_len >= 4, "regime_len must be at least 4");
    let low = low_entropy_chain();
    let high = high_entropy_chain();
    let letter_base = vocab.char_id('a');
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|_| {
            let mut tokens = Vec::with_capacity(SEGMENTS_PER_DOC * regime_len);
            let mut segments = Vec::with_capacity(SEGMENTS_PER_DOC);
            let mut state = rng.gen_range(0..MARKOV_STATES);
            for seg_idx in 0..SEGMENTS_PER_DOC {
                let (chain, regime, source) = if seg_idx % 2 == 0 {
                    (&low, Regime::Low, "markov-low")
                } else {
                    (&high, Regime::High, "markov-high")
                };
                let start = tokens.len();
                for _ in 0..regime_len {
                    if tokens.is_empty() {
                        // First token of the document: uniform initial state.
                        tokens.push(letter_base + state as TokenId);
                        continue;
                    }
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut next = MARKOV_STATES - 1;
                    for (j, &p) in chain[state].iter().enumerate() {
                        acc += p;
                        if u < acc {
                            next = j;
                            break;
                        }
                    }
                    state = next;
                    tokens.push(letter_base + state as TokenId);
                }
                segments.push(Segment {
                    start,
                    end: tokens.len(),
                    regime,
                    source: source.to_string(),
                });
            }
            let doc = Document { tokens, segments };
            doc.check_segments();
            doc
        })
        .collect()
}

/// Arithmetic and Markov documents interleaved under one seed.
pub fn build_mixed_corpus(
    vocab: &Vocabulary,
    seed: u64,
    n_docs: usize,
    digits: u32,
    regime_len: usize,
) -> Vec<Document> {
    let n_arith = n_docs / 2;
    let n_markov = n_docs - n_arith;
    let mut docs = build_arithmetic_corpus(vocab, seed, n_arith, digits);
    docs.extend(build_markov_corpus(vocab, seed.wrapping_add(1), n_markov, regime_len));
    docs
}

// ── Batching ─────────────────────────────────────────────────────────

/// One padded batch. `rows` are padded to the batch sequence length with
/// `pad_id`; `loss_mask` is false at padding; `regimes` carries the
/// generator labels (None at padding).
#[derive(Debug, Clone)]
pub struct Batch {
    pub rows: Vec<Vec<TokenId>>,
    pub lens: Vec<usize>,
    pub loss_mask: Vec<Vec<bool>>,
    pub regimes: Vec<Vec<Option<Regime>>>,
    pub doc_indices: Vec<usize>,
}

/// Deterministic epoch-shuffled batcher. `batch_at(step)` maps a global step
/// to (epoch, batch) so that resumed runs see the same data order.
pub struct Batcher<'a> {
    docs: &'a [Document],
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    cached_epoch: Option<(usize, Vec<usize>)>,
}

impl<'a> Batcher<'a> {
    pub fn new(docs: &'a [Document], batch_size: usize, seq_len: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        assert!(!docs.is_empty(), "corpus must be non-empty");
        Batcher { docs, batch_size, seq_len, seed, cached_epoch: None }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.docs.len().div_ceil(self.batch_size)
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        let needs = match &self.cached_epoch {
            Some((e, _)) => *e != epoch,
            None => true,
        };
        if needs {
            let mut order: Vec<usize> = (0..self.docs.len()).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64));
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            self.cached_epoch = Some((epoch, order));
        }
        &self.cached_epoch.as_ref().unwrap().1
    }

    pub fn batch_at(&mut self, step: usize) -> Batch {
        let bpe = self.batches_per_epoch();
        let epoch = step / bpe;
        let idx = step % bpe;
        let (batch_size, seq_len) = (self.batch_size, self.seq_len);
        let docs = self.docs;
        let order = self.epoch_order(epoch);
        let lo = idx * batch_size;
        let hi = (lo + batch_size).min(order.len());
        let doc_indices: Vec<usize> = order[lo..hi].to_vec();

        let mut rows = Vec::with_capacity(doc_indices.len());
        let mut lens = Vec::with_capacity(doc_indices.len());
        let mut loss_mask = Vec::with_capacity(doc_indices.len());
        let mut regimes = Vec::with_capacity(doc_indices.len());
        for &di in &doc_indices {
            let doc = &docs[di];
            let len = doc.tokens.len().min(seq_len);
            let mut row = doc.tokens[..len].to_vec();
            row.resize(seq_len, PAD_ID);
            let mut mask = vec![true; len];
            mask.resize(seq_len, false);
            let mut regime_row: Vec<Option<Regime>> =
                (0..len).map(|p| doc.regime_at(p)).collect();
            regime_row.resize(seq_len, None);
            rows.push(row);
            lens.push(len);
            loss_mask.push(mask);
            regimes.push(regime_row);
        }
        Batch { rows, lens, loss_mask, regimes, doc_indices }
    }
}

/// One deterministic pass over the corpus (a single epoch of batches).
pub fn batch_iter<'a>(
    docs: &'a [Document],
    batch_size: usize,
    seq_len: usize,
    seed: u64,
) -> impl Iterator<Item = Batch> + 'a {
    let mut batcher = Batcher::new(docs, batch_size, seq_len, seed);
    let bpe = batcher.batches_per_epoch();
    (0..bpe).map(move |i| batcher.batch_at(i))
}

// ── Statistics ───────────────────────────────────────────────────────

/// Empirical conditional next-token entropy H(x_p | x_{p-1}) in nats,
/// split by the regime of position `p`. Position 0 of each document is
/// excluded (it has no predecessor).
pub fn conditional_entropy_by_regime(docs: &[Document]) -> HashMap<Regime, f64> {
    let mut counts: HashMap<Regime, HashMap<(TokenId, TokenId), u64>> = HashMap::new();
    for doc in docs {
        for p in 1..doc.tokens.len() {
            let regime = doc.regime_at(p).expect("segments cover the document");
            *counts
                .entry(regime)
                .or_default()
                .entry((doc.tokens[p - 1], doc.tokens[p]))
                .or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .map(|(regime, pairs)| {
            let mut by_prev: HashMap<TokenId, Vec<u64>> = HashMap::new();
            for ((prev, _next), n) in &pairs {
                by_prev.entry(*prev).or_default().push(*n);
            }
            let total: u64 = pairs.values().sum();
            let mut h = 0.0;
            for ns in by_prev.values() {
                let prev_total: u64 = ns.iter().sum();
                let p_prev = prev_total as f64 / total as f64;
                let mut h_row = 0.0;
                for &n in ns {
                    let p = n as f64 / prev_total as f64;
                    h_row -= p * p.ln();
                }
                h += p_prev * h_row;
            }
            (regime, h)
        })
        .collect()
}

// ── Export / import ──────────────────────────────────────────────────

pub fn export_corpus(
    vocab: &Vocabulary,
    docs: &[Document],
    text_path: &Path,
    segments_path: &Path,
) -> Result<()> {
    let mut text = std::fs::File::create(text_path)?;
    let mut segs = std::fs::File::create(segments_path)?;
    for doc in docs {
        writeln!(text, "{}", vocab.detokenize(&doc.tokens)?)?;
        let line: Vec<String> = doc
            .segments
            .iter()
            .map(|s| format!("{}-{}:{}:{}", s.start, s.end, s.regime.tag(), s.source))
            .collect();
        writeln!(segs, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn import_corpus(
    vocab: &Vocabulary,
    text_path: &Path,
    segments_path: &Path,
) -> Result<Vec<Document>> {
    let text = BufReader::new(std::fs::File::open(text_path)?);
    let segs = BufReader::new(std::fs::File::open(segments_path)?);
    let mut docs = Vec::new();
    for (line_no, (text_line, seg_line)) in text.lines().zip(segs.lines()).enumerate() {
        let tokens = vocab.tokenize(&text_line?)?;
        let mut segments = Vec::new();
        let seg_line = seg_line?;
        for record in seg_line.split_whitespace() {
            let parse = || -> Option<Segment> {
                let (span, rest) = record.split_once(':')?;
                let (regime_tag, source) = rest.split_once(':')?;
                let (start, end) = span.split_once('-')?;
                let regime = match regime_tag {
                    "L" => Regime::Low,
                    "H" => Regime::High,
                    _ => return None,
                };
                Some(Segment {
                    start: start.parse().ok()?,
                    end: end.parse().ok()?,
                    regime,
                    source: source.to_string(),
                })
            };
            segments.push(parse().ok_or_else(|| CorpusError::Import {
                line: line_no + 1,
                msg: format!("bad segment record {record:?}"),
            })?);
        }
        let doc = Document { tokens, segments };
        doc.check_segments();
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::default()
    }

    #[test]
    fn tokenize_round_trip() {
        let v = vocab();
        let text = "a+b=";
        let toks = v.tokenize(text).unwrap();
        assert_eq!(v.detokenize(&toks).unwrap(), text);
        assert!(v.tokenize("").unwrap().is_empty());
    }

    #[test]
    fn tokenize_unknown_char_reports_offset() {
        let v = vocab();
        match v.tokenize("ab€") {
            Err(CorpusError::UnknownChar { ch, offset }) => {
                assert_eq!(ch, '€');
                assert_eq!(offset, 2);
            }
            other => panic!("expected UnknownChar, got {other:?}"),
        }
    }

    #[test]
    fn arithmetic_sums_are_correct() {
        // Independent oracle: re-parse the emitted text and re-add.
        let v = vocab();
        let docs = build_arithmetic_corpus(&v, 7, 50, 2);
        let mut items = 0;
        for doc in &docs {
            let text = v.detokenize(&doc.tokens).unwrap();
            for item in text.split(';').filter(|s| !s.is_empty()) {
                let body = item.strip_prefix("Q:").expect("item starts with Q:");
                let (lhs, c) = body.split_once('=').unwrap();
                let (a, b) = lhs.split_once('+').unwrap();
                let (a, b, c): (u64, u64, u64) =
                    (a.parse().unwrap(), b.parse().unwrap(), c.parse().unwrap());
                assert_eq!(a + b, c, "bad item {item:?}");
                items += 1;
            }
        }
        assert!(items >= 200);
    }

    #[test]
    fn arithmetic_single_digit_answers_bounded() {
        let v = vocab();
        let docs = build_arithmetic_corpus(&v, 9, 30, 1);
        for doc in &docs {
            let text = v.detokenize(&doc.tokens).unwrap();
            for item in text.split(';').filter(|s| !s.is_empty()) {
                let (_, c) = item.split_once('=').unwrap();
                let c: u64 = c.parse().unwrap();
                assert!(c <= 18);
                assert!(c.to_string().len() <= 2);
            }
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let v = vocab();
        assert_eq!(
            build_arithmetic_corpus(&v, 11, 20, 2),
            build_arithmetic_corpus(&v, 11, 20, 2)
        );
        assert_eq!(
            build_markov_corpus(&v, 11, 20, 8),
            build_markov_corpus(&v, 11, 20, 8)
        );
    }

    #[test]
    fn no_generated_document_contains_reserved_ids() {
        let v = vocab();
        let mut docs = build_mixed_corpus(&v, 5, 40, 2, 12);
        docs.extend(build_arithmetic_corpus(&v, 6, 10, 3));
        for doc in &docs {
            assert!(doc.tokens.iter().all(|&t| !v.is_special(t)));
        }
    }

    #[test]
    fn markov_segments_alternate() {
        let v = vocab();
        for doc in build_markov_corpus(&v, 3, 10, 6) {
            for (i, seg) in doc.segments.iter().enumerate() {
                let expected = if i % 2 == 0 { Regime::Low } else { Regime::High };
                assert_eq!(seg.regime, expected);
                assert_eq!(seg.end - seg.start, 6);
            }
        }
    }

    #[test]
    fn markov_low_regime_entropy_matches_analytic() {
        let v = vocab();
        let low = low_entropy_chain();
        let analytic = chain_row_entropy(&low);
        // ~2.3M tokens total, half of them in low segments.
        let docs = build_markov_corpus(&v, 21, 12_000, 32);
        let measured = conditional_entropy_by_regime(&docs);
        let low_tokens: usize = docs
            .iter()
            .flat_map(|d| &d.segments)
            .filter(|s| s.regime == Regime::Low)
            .map(|s| s.end - s.start)
            .sum();
        assert!(low_tokens >= 1_000_000, "need at least 1e6 low tokens, got {low_tokens}");
        let got = measured[&Regime::Low];
        assert!(
            (got - analytic).abs() < 0.05,
            "measured {got} vs analytic {analytic}"
        );
    }

    #[test]
    fn entropy_gap_exceeds_one_nat_on_markov() {
        let v = vocab();
        let docs = build_markov_corpus(&v, 2, 400, 24);
        let measured = conditional_entropy_by_regime(&docs);
        assert!(measured[&Regime::High] > measured[&Regime::Low] + 1.0);
    }

    #[test]
    fn high_regime_entropy_exceeds_low_on_arithmetic() {
        let v = vocab();
        let docs = build_arithmetic_corpus(&v, 13, 300, 2);
        let measured = conditional_entropy_by_regime(&docs);
        assert!(measured[&Regime::High] > measured[&Regime::Low]);
    }

    #[test]
    fn batch_sizes_split_partial_tail() {
        let v = vocab();
        let docs = build_arithmetic_corpus(&v, 1, 10, 1);
        let sizes: Vec<usize> = batch_iter(&docs, 4, 64, 0).map(|b| b.rows.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn batches_are_deterministic_and_pads_flagged() {
        let v = vocab();
        let docs = build_arithmetic_corpus(&v, 1, 10, 1);
        let a: Vec<Batch> = batch_iter(&docs, 4, 64, 9).collect();
        let b: Vec<Batch> = batch_iter(&docs, 4, 64, 9).collect();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.doc_indices, y.doc_indices);
            assert_eq!(x.rows, y.rows);
            for (row, mask) in x.rows.iter().zip(x.loss_mask.iter()) {
                for (tok, &m) in row.iter().zip(mask.iter()) {
                    assert_eq!(*tok == PAD_ID, !m, "pad positions must be loss-exempt");
                }
            }
        }
    }

    #[test]
    fn export_import_round_trip() {
        let v = vocab();
        let docs = build_mixed_corpus(&v, 4, 12, 2, 8);
        let dir = tempfile::tempdir().unwrap();
        let text = dir.path().join("corpus.txt");
        let segs = dir.path().join("corpus.segments");
        export_corpus(&v, &docs, &text, &segs).unwrap();
        let back = import_corpus(&v, &text, &segs).unwrap();
        assert_eq!(docs, back);
    }

    #[test]
    fn chain_entropy_bounds() {
        assert!(chain_row_entropy(&low_entropy_chain()) < 0.3);
        assert!(chain_row_entropy(&high_entropy_chain()) > 2.0);
    }
}
