//! Adaptive-horizon decoding.
//!
//! Outer loop per window: plan a horizon `K` (from the horizon head, a fixed
//! block size, or 1 for greedy decoding), fill the window with mask tokens,
//! then sweep. Each sweep runs one forward pass over the committed prefix and
//! the window; the prediction at the cursor is accepted unconditionally, and
//! the contiguous chain of follow-up predictions whose confidence exceeds
//! `gamma` is committed with it, advancing the cursor by `1 + delta`. Drafts
//! beyond a broken chain stay in the window as inputs to later sweeps but are
//! never committed by them.
//!
//! Forward-pass accounting counts denoising sweeps only; planning reuses the
//! cache-extension pass and is bookkeeping, matching the sweep-count metric
//! used for forward-passes-per-token comparisons.

mod forward;

pub use forward::{forward_block, BlockOutput, KvCache, WindowVis};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenId;
use crate::model::{khead_forward, Backbone, HorizonDistribution, KHead, ModelError};
use crate::numerics::{kernels, Scalar};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("prompt length {len} leaves no room below the length limit {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("fixed block size {k} outside [1, {k_max}]")]
    InvalidFixedBlock { k: usize, k_max: usize },
    #[error("elastic mode requires a horizon head")]
    MissingHorizonHead,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    /// Horizon planned by the horizon head each outer iteration.
    Elastic,
    /// Constant window size (the fixed-block baseline).
    FixedBlock(usize),
    /// Token-by-token greedy decoding (window of 1).
    ArGreedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    Causal,
    /// Active window positions are mutually visible (ablation toggle).
    BidirectionalWindow,
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Confidence gate: a drafted token is committed only when the maximum
    /// softmax probability of its predictive distribution exceeds `gamma`.
    pub gamma: f64,
    pub max_len: usize,
    pub attention: AttentionKind,
    pub use_cache: bool,
    /// Committing this token stops generation.
    pub eos_id: Option<TokenId>,
    /// Token ids never produced by argmax (reserved ids like pad/bos/mask).
    pub suppressed: Vec<TokenId>,
}

impl DecodeConfig {
    pub fn new(mode: DecodeMode, max_len: usize) -> Self {
        DecodeConfig {
            mode,
            gamma: 0.9,
            max_len,
            attention: AttentionKind::Causal,
            use_cache: true,
            eos_id: Some(crate::corpus::EOS_ID),
            suppressed: vec![crate::corpus::PAD_ID, crate::corpus::BOS_ID, crate::corpus::MASK_ID],
        }
    }
}

/// Predictions for the window slots `from_slot..K` of one sweep.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub from_slot: usize,
    pub tokens: Vec<TokenId>,
    pub confidence: Vec<f64>,
    pub entropy: Vec<f64>,
}

/// One record per sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryEvent {
    pub outer: usize,
    pub planned_k: usize,
    pub sweep: usize,
    pub cursor: usize,
    pub delta: usize,
    pub committed: Vec<TokenId>,
    pub confidence: Vec<f64>,
    pub entropy: Vec<f64>,
    pub forward_passes: usize,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Prompt plus everything committed, in order.
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub events: Vec<TrajectoryEvent>,
    pub forward_passes: usize,
}

impl DecodeOutput {
    pub fn new_tokens(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    /// Denoiser evaluations per committed token.
    pub fn forward_passes_per_token(&self) -> f64 {
        self.forward_passes as f64 / self.new_tokens().max(1) as f64
    }
}

/// Pick the horizon from a planned distribution, clamped so the window fits
/// under the length limit.
pub fn plan_horizon(dist: &HorizonDistribution, remaining: usize) -> usize {
    dist.argmax_k().min(remaining)
}

/// Apply the gate to one sweep: force the cursor slot, extend the contiguous
/// confident chain, stash later confident drafts in the window, and return
/// `(delta, committed chunk, eos committed)`. A committed EOS caps the chunk.
pub fn gate_and_commit(
    window: &mut [TokenId],
    sweep: &SweepResult,
    gamma: f64,
    eos_id: Option<TokenId>,
) -> (usize, Vec<TokenId>, bool) {
    let step = sweep.from_slot;
    let k = window.len();
    debug_assert_eq!(sweep.tokens.len(), k - step);
    window[step] = sweep.tokens[0];
    let mut delta = 0usize;
    let mut chain_valid = true;
    for slot in step + 1..k {
        let i = slot - step;
        if sweep.confidence[i] > gamma {
            window[slot] = sweep.tokens[i];
            if chain_valid {
                delta += 1;
            }
        } else {
            chain_valid = false;
        }
    }
    let mut chunk = window[step..=step + delta].to_vec();
    let mut hit_eos = false;
    if let Some(eos) = eos_id {
        if let Some(pos) = chunk.iter().position(|&t| t == eos) {
            chunk.truncate(pos + 1);
            delta = pos;
            hit_eos = true;
        }
    }
    (delta, chunk, hit_eos)
}

fn sweep_from_logits<S: Scalar>(
    block: &BlockOutput<S>,
    wstart: usize,
    step: usize,
    k: usize,
    vocab: usize,
    suppressed: &[TokenId],
) -> SweepResult {
    let mut tokens = Vec::with_capacity(k - step);
    let mut confidence = Vec::with_capacity(k - step);
    let mut entropy = Vec::with_capacity(k - step);
    for slot in step..k {
        let row = block.logits_row(wstart + slot - 1, vocab);
        let mut probs: Vec<S> = row.to_vec();
        kernels::softmax_row(&mut probs);
        entropy.push(kernels::entropy_nats(&probs));
        let mut best: Option<usize> = None;
        for (id, &p) in probs.iter().enumerate() {
            if suppressed.contains(&(id as TokenId)) {
                continue;
            }
            if best.map_or(true, |b| p > probs[b]) {
                best = Some(id);
            }
        }
        let best = best.expect("vocabulary larger than the suppressed set");
        tokens.push(best as TokenId);
        confidence.push(probs[best].to_f64().unwrap_or(0.0));
    }
    SweepResult { from_slot: step, tokens, confidence, entropy }
}

/// Decode from a prompt. Deterministic: argmax everywhere, no sampling.
pub fn generate<S: Scalar>(
    backbone: &Backbone<S>,
    khead: Option<&KHead<S>>,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    let mcfg = &backbone.cfg;
    let max_len = cfg.max_len.min(mcfg.max_seq_len);
    if prompt.is_empty() {
        return Err(DecodeError::EmptyPrompt);
    }
    if prompt.len() >= max_len {
        return Err(DecodeError::PromptTooLong { len: prompt.len(), max: max_len });
    }
    if let DecodeMode::FixedBlock(k) = cfg.mode {
        if k < 1 || k > mcfg.k_max {
            return Err(DecodeError::InvalidFixedBlock { k, k_max: mcfg.k_max });
        }
    }
    if matches!(cfg.mode, DecodeMode::Elastic) && khead.is_none() {
        return Err(DecodeError::MissingHorizonHead);
    }

    let vocab = mcfg.vocab_size;
    let d = mcfg.d_model;
    let mask_id = crate::corpus::MASK_ID;
    let mut committed: Vec<TokenId> = prompt.to_vec();
    let mut cache = KvCache::new(mcfg.n_layers);
    let mut events = Vec::new();
    let mut forward_passes = 0usize;
    let mut outer = 0usize;
    let mut stopped = false;

    while !stopped && committed.len() < max_len {
        let c0 = committed.len();
        let planned = match cfg.mode {
            DecodeMode::ArGreedy => 1,
            DecodeMode::FixedBlock(k) => k,
            DecodeMode::Elastic => {
                // Extend the cache through the last committed token; its
                // hidden state is the planning input. Not counted as a sweep.
                let khead = khead.expect("checked above");
                let (from, append) = if cfg.use_cache { (cache.len(), c0) } else { (0, 0) };
                let block = forward_block(
                    backbone,
                    &mut cache,
                    &committed[from..],
                    from,
                    WindowVis::causal(),
                    append,
                    c0 - 1,
                )?;
                let h = block.hidden_row(c0 - 1, d);
                khead_forward(khead, h).argmax_k()
            }
        };
        let k = planned.min(max_len - c0);
        if k == 0 {
            break;
        }
        let wstart = c0;
        let wend = wstart + k;
        let mut window = vec![mask_id; k];
        let mut step = 0usize;
        let mut sweep_idx = 0usize;

        while step < k {
            let c = committed.len();
            let from = if cfg.use_cache { cache.len().min(wstart + step - 1) } else { 0 };
            let append = if cfg.use_cache { c } else { 0 };
            let mut block_tokens = Vec::with_capacity(wend - from);
            block_tokens.extend_from_slice(&committed[from..]);
            block_tokens.extend_from_slice(&window[step..]);
            let vis = WindowVis {
                active_start: c,
                window_end: wend,
                bidirectional: matches!(cfg.attention, AttentionKind::BidirectionalWindow),
            };
            let block = forward_block(
                backbone,
                &mut cache,
                &block_tokens,
                from,
                vis,
                append,
                wstart + step - 1,
            )?;
            forward_passes += 1;

            let sweep = sweep_from_logits(&block, wstart, step, k, vocab, &cfg.suppressed);
            let cursor_before = step;
            let (delta, chunk, hit_eos) =
                gate_and_commit(&mut window, &sweep, cfg.gamma, cfg.eos_id);
            debug_assert!(chunk.iter().all(|&t| t != mask_id));
            committed.extend_from_slice(&chunk);
            events.push(TrajectoryEvent {
                outer,
                planned_k: k,
                sweep: sweep_idx,
                cursor: cursor_before,
                delta,
                committed: chunk,
                confidence: sweep.confidence.clone(),
                entropy: sweep.entropy.clone(),
                forward_passes,
            });
            step += 1 + delta;
            sweep_idx += 1;
            if hit_eos {
                stopped = true;
                break;
            }
        }
        outer += 1;
    }

    Ok(DecodeOutput { tokens: committed, prompt_len: prompt.len(), events, forward_passes })
}

/// Teacher-forced planning probe: with `doc[..t]` as the committed prefix,
/// return the next-token entropy at the planning row and the horizon the
/// head would pick. This is what the entropy/horizon correlation experiment
/// measures against the generator's regime labels.
pub fn plan_probe<S: Scalar>(
    backbone: &Backbone<S>,
    khead: &KHead<S>,
    prefix: &[TokenId],
) -> Result<(f64, usize)> {
    assert!(!prefix.is_empty());
    let d = backbone.cfg.d_model;
    let t = prefix.len();
    let mut cache = KvCache::new(backbone.cfg.n_layers);
    let block = forward_block(
        backbone,
        &mut cache,
        prefix,
        0,
        WindowVis::causal(),
        0,
        t - 1,
    )?;
    let mut probs: Vec<S> = block.logits_row(t - 1, backbone.cfg.vocab_size).to_vec();
    kernels::softmax_row(&mut probs);
    let entropy = kernels::entropy_nats(&probs);
    let k = khead_forward(khead, block.hidden_row(t - 1, d)).argmax_k();
    Ok((entropy, k))
}
