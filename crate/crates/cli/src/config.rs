//! Run configuration: a TOML file with sections for the model, the corpus,
//! both training stages, and decoding. Every field has a default, so partial
//! files work; CLI flags override on top.

use anyhow::{bail, Context, Result};
use cdlm_core::corpus::{
    build_arithmetic_corpus, build_markov_corpus, build_mixed_corpus, Document, Vocabulary,
};
use cdlm_core::infer::{AttentionKind, DecodeMode};
use cdlm_core::model::ModelConfig;
use cdlm_core::train::{Stage1Config, Stage2Config, TrainAttention};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// "arithmetic", "markov", or "mixed".
    pub kind: String,
    pub n_docs: usize,
    /// Operand digit count for arithmetic items (1..=3).
    pub digits: u32,
    /// Tokens per entropy regime segment in the Markov corpus.
    pub regime_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { kind: "mixed".into(), n_docs: 400, digits: 1, regime_len: 24 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    /// "elastic", "fixed", or "ar".
    pub mode: String,
    pub gamma: f64,
    pub max_new: usize,
    pub cache: bool,
    /// Block size for "fixed" mode.
    pub fixed_k: usize,
    /// "causal" or "bidirectional".
    pub attention: String,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            mode: "elastic".into(),
            gamma: 0.9,
            max_new: 32,
            cache: true,
            fixed_k: 16,
            attention: "causal".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub corpus: CorpusSection,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub decode: DecodeSection,
}

impl AppConfig {
    pub fn load(path: Option<&std::path::Path>) -> Result<Self> {
        let mut cfg = match path {
            None => AppConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
        };
        if cfg.log_every == 0 {
            cfg.log_every = 25;
        }
        // The two stages and the model must agree on the horizon bound.
        cfg.stage1.k_max = cfg.model.k_max;
        cfg.stage2.k_max = cfg.model.k_max;
        Ok(cfg)
    }

    /// Hash of the full, merged configuration; stamped into every report.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_corpus(&self, vocab: &Vocabulary, seed: u64) -> Result<Vec<Document>> {
        let c = &self.corpus;
        Ok(match c.kind.as_str() {
            "arithmetic" => build_arithmetic_corpus(vocab, seed, c.n_docs, c.digits),
            "markov" => build_markov_corpus(vocab, seed, c.n_docs, c.regime_len),
            "mixed" => build_mixed_corpus(vocab, seed, c.n_docs, c.digits, c.regime_len),
            other => bail!("unknown corpus kind {other:?} (arithmetic | markov | mixed)"),
        })
    }

    pub fn decode_mode(&self) -> Result<DecodeMode> {
        parse_mode(&self.decode.mode, self.decode.fixed_k)
    }

    pub fn decode_attention(&self) -> Result<AttentionKind> {
        match self.decode.attention.as_str() {
            "causal" => Ok(AttentionKind::Causal),
            "bidirectional" => Ok(AttentionKind::BidirectionalWindow),
            other => bail!("unknown attention {other:?} (causal | bidirectional)"),
        }
    }
}

pub fn parse_mode(mode: &str, fixed_k: usize) -> Result<DecodeMode> {
    match mode {
        "elastic" => Ok(DecodeMode::Elastic),
        "fixed" => Ok(DecodeMode::FixedBlock(fixed_k)),
        "ar" => Ok(DecodeMode::ArGreedy),
        other => bail!("unknown mode {other:?} (elastic | fixed | ar)"),
    }
}

pub fn train_attention(kind: AttentionKind) -> TrainAttention {
    match kind {
        AttentionKind::Causal => TrainAttention::Causal,
        AttentionKind::BidirectionalWindow => TrainAttention::BidirectionalSpan,
    }
}
