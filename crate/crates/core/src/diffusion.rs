//! Forward corruption process, attention-mask construction, and assembly of
//! stage-one training examples.
//!
//! A training example keeps the history clean and corrupts a sampled span of
//! length `K`: every span position becomes the mask token, then a small
//! subset is un-masked again — half restored to ground truth, half replaced
//! with random tokens — so the denoiser learns to operate on (and overwrite)
//! imperfect drafts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::TokenId;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("time {t} outside [0,1]")]
    TimeOutOfRange { t: f64 },
    #[error("loss weight undefined at t = {t}; t must lie in (0,1]")]
    WeightAtZero { t: f64 },
    #[error("attention window [{start},{end}) out of range for length {len}")]
    WindowOutOfRange { start: usize, end: usize, len: usize },
    #[error("sequence of length {len} too short for horizon {k_max} (needs {k_max} + 2)")]
    SequenceTooShort { len: usize, k_max: usize },
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

// ── Noise schedule ───────────────────────────────────────────────────

/// Survival probability schedule for the absorbing corruption process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseSchedule {
    Linear,
}

impl NoiseSchedule {
    /// α(t): probability that a token survives un-masked at time `t`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(DiffusionError::TimeOutOfRange { t });
        }
        match self {
            NoiseSchedule::Linear => Ok(1.0 - t),
        }
    }
}

pub const DEFAULT_WEIGHT_CLAMP: f64 = 100.0;

/// Time-dependent loss weight `1/t` under the linear schedule, clamped.
pub fn loss_weight(t: f64) -> Result<f64> {
    loss_weight_clamped(t, DEFAULT_WEIGHT_CLAMP)
}

pub fn loss_weight_clamped(t: f64, clamp: f64) -> Result<f64> {
    if t <= 0.0 || t > 1.0 {
        return Err(DiffusionError::WeightAtZero { t });
    }
    Ok((1.0 / t).min(clamp))
}

// ── Attention masks ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Strictly lower-triangular visibility: key j visible to query i iff j <= i.
    Causal,
    /// Causal everywhere except positions in `[start, end)`, which are
    /// mutually visible (the block-diffusion ablation).
    BidirectionalWindow { start: usize, end: usize },
}

/// Additive attention mask in boolean form: `true` ⇔ score kept, `false` ⇔
/// score driven to -inf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    mode: MaskMode,
}

impl AttentionMask {
    pub fn new(len: usize, mode: MaskMode) -> Result<Self> {
        assert!(len >= 1, "mask length must be at least 1");
        if let MaskMode::BidirectionalWindow { start, end } = mode {
            if start > end || end > len {
                return Err(DiffusionError::WindowOutOfRange { start, end, len });
            }
        }
        Ok(AttentionMask { len, mode })
    }

    pub fn causal(len: usize) -> Self {
        AttentionMask { len, mode: MaskMode::Causal }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    #[inline]
    pub fn is_visible(&self, query: usize, key: usize) -> bool {
        debug_assert!(query < self.len && key < self.len);
        if key <= query {
            return true;
        }
        match self.mode {
            MaskMode::Causal => false,
            MaskMode::BidirectionalWindow { start, end } => {
                query >= start && query < end && key >= start && key < end
            }
        }
    }

    /// Flattened row-major visibility, suitable for the masked-softmax op.
    pub fn visibility(&self) -> Vec<bool> {
        let mut v = Vec::with_capacity(self.len * self.len);
        for q in 0..self.len {
            for k in 0..self.len {
                v.push(self.is_visible(q, k));
            }
        }
        v
    }
}

// ── Stage-one example construction ───────────────────────────────────

/// Token-id facts the corruption process needs from the vocabulary:
/// the mask id and the id range it may sample random replacement tokens from.
#[derive(Debug, Clone)]
pub struct TokenSpace {
    pub mask_id: TokenId,
    pub non_special: std::ops::Range<TokenId>,
}

#[derive(Debug, Clone)]
pub struct CorruptionConfig {
    /// Fraction of the masked span that is un-masked again (stochastic
    /// restoration).
    pub rho: f64,
    /// Of the restored positions, the fraction set to ground truth; the rest
    /// become uniform random non-special tokens.
    pub restore_gt_frac: f64,
    pub k_max: usize,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig { rho: 0.10, restore_gt_frac: 0.5, k_max: 16 }
    }
}

/// History/target partition of one training sequence. `ar_flags[p]` marks
/// history positions whose next-token loss is taken (predicting token `p`
/// from hidden state `p-1`); `diff_flags[p]` marks the `K` span positions.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub input: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub ar_flags: Vec<bool>,
    pub diff_flags: Vec<bool>,
    pub k: usize,
    pub split: usize,
}

/// Independent per-token corruption: keep with probability α(t), else mask.
pub fn corrupt_iid(
    x: &[TokenId],
    t: f64,
    schedule: NoiseSchedule,
    mask_id: TokenId,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>> {
    debug_assert!(x.iter().all(|&tok| tok != mask_id), "input must not contain the mask token");
    let alpha = schedule.alpha(t)?;
    Ok(x.iter()
        .map(|&tok| if rng.gen::<f64>() < alpha { tok } else { mask_id })
        .collect())
}

/// Number of span positions to un-mask for a span of length `k`:
/// `floor(rho*k)` plus a Bernoulli draw on the fractional part, so the count
/// matches `rho*k` in expectation at every `k`.
pub fn restored_count(rho: f64, k: usize, rng: &mut ChaCha8Rng) -> usize {
    let target = rho * k as f64;
    let base = target.floor();
    let frac = target - base;
    base as usize + usize::from(frac > 0.0 && rng.gen::<f64>() < frac)
}

pub fn make_stage1_example(
    x: &[TokenId],
    cfg: &CorruptionConfig,
    space: &TokenSpace,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample> {
    if x.len() < cfg.k_max + 2 {
        return Err(DiffusionError::SequenceTooShort { len: x.len(), k_max: cfg.k_max });
    }
    let k = rng.gen_range(1..=cfg.k_max);
    let split = rng.gen_range(1..=x.len() - k);
    Ok(make_stage1_example_at(x, cfg, space, k, split, rng))
}

/// Deterministic-span variant used by tests and degenerate-case checks.
pub fn make_stage1_example_at(
    x: &[TokenId],
    cfg: &CorruptionConfig,
    space: &TokenSpace,
    k: usize,
    split: usize,
    rng: &mut ChaCha8Rng,
) -> TrainingExample {
    assert!(k >= 1 && split >= 1 && split + k <= x.len());
    let mut input = x.to_vec();
    for tok in input[split..split + k].iter_mut() {
        *tok = space.mask_id;
    }
    let n_restore = restored_count(cfg.rho, k, rng).min(k);
    let picks = rand::seq::index::sample(rng, k, n_restore);
    for off in picks {
        let pos = split + off;
        input[pos] = if rng.gen::<f64>() < cfg.restore_gt_frac {
            x[pos]
        } else {
            rng.gen_range(space.non_special.clone())
        };
    }
    let ar_flags: Vec<bool> = (0..x.len()).map(|p| p >= 1 && p < split).collect();
    let diff_flags: Vec<bool> = (0..x.len()).map(|p| p >= split && p < split + k).collect();
    TrainingExample { input, targets: x.to_vec(), ar_flags, diff_flags, k, split }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn space() -> TokenSpace {
        TokenSpace { mask_id: 3, non_special: 4..45 }
    }

    #[test]
    fn alpha_endpoints_and_midpoint() {
        let s = NoiseSchedule::Linear;
        assert_eq!(s.alpha(0.0).unwrap(), 1.0);
        assert_eq!(s.alpha(1.0).unwrap(), 0.0);
        assert_eq!(s.alpha(0.25).unwrap(), 0.75);
        assert!(s.alpha(1.5).is_err());
        assert!(s.alpha(-0.1).is_err());
    }

    #[test]
    fn loss_weight_formula_and_clamp() {
        assert_eq!(loss_weight(1.0).unwrap(), 1.0);
        assert_eq!(loss_weight(0.5).unwrap(), 2.0);
        assert_eq!(loss_weight(0.001).unwrap(), 100.0);
        assert!(loss_weight(0.0).is_err());
    }

    #[test]
    fn causal_mask_l3_visible_pairs() {
        let m = AttentionMask::causal(3);
        let mut visible = Vec::new();
        for q in 0..3 {
            for k in 0..3 {
                if m.is_visible(q, k) {
                    visible.push((q, k));
                }
            }
        }
        assert_eq!(visible, vec![(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)]);
    }

    #[test]
    fn causal_mask_exhaustive_up_to_64() {
        for len in 1..=64 {
            let m = AttentionMask::causal(len);
            for q in 0..len {
                for k in 0..len {
                    assert_eq!(m.is_visible(q, k), k <= q, "len={len} q={q} k={k}");
                }
            }
        }
    }

    #[test]
    fn single_cell_mask() {
        let m = AttentionMask::causal(1);
        assert!(m.is_visible(0, 0));
        assert_eq!(m.visibility(), vec![true]);
    }

    #[test]
    fn bidirectional_window_adds_forward_pairs() {
        let m = AttentionMask::new(3, MaskMode::BidirectionalWindow { start: 1, end: 3 }).unwrap();
        // Causal pairs plus (1,2).
        assert!(m.is_visible(1, 2));
        assert!(!m.is_visible(0, 1));
        assert!(!m.is_visible(0, 2));
        for q in 0..3 {
            for k in 0..=q {
                assert!(m.is_visible(q, k));
            }
        }
        assert!(AttentionMask::new(3, MaskMode::BidirectionalWindow { start: 2, end: 4 }).is_err());
    }

    #[test]
    fn corrupt_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<u32> = (4..40).collect();
        assert_eq!(corrupt_iid(&x, 0.0, NoiseSchedule::Linear, 3, &mut rng).unwrap(), x);
        let all_masked = corrupt_iid(&x, 1.0, NoiseSchedule::Linear, 3, &mut rng).unwrap();
        assert!(all_masked.iter().all(|&t| t == 3));
    }

    #[test]
    fn corrupt_mask_fraction_within_five_sigma() {
        // Binomial: sigma = sqrt(p(1-p)/n).
        let n = 1_000_000usize;
        let x: Vec<u32> = vec![7; n];
        for &t in &[0.1, 0.5, 0.9] {
            let mut rng = ChaCha8Rng::seed_from_u64(42 + (t * 10.0) as u64);
            let y = corrupt_iid(&x, t, NoiseSchedule::Linear, 3, &mut rng).unwrap();
            let masked = y.iter().filter(|&&v| v == 3).count() as f64 / n as f64;
            let sigma = (t * (1.0 - t) / n as f64).sqrt();
            assert!(
                (masked - t).abs() < 5.0 * sigma,
                "t={t}: masked fraction {masked} vs 5 sigma {}",
                5.0 * sigma
            );
        }
    }

    #[test]
    fn restoration_count_mean_matches_rho_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let total: usize = (0..draws).map(|_| restored_count(0.1, 16, &mut rng)).sum();
        let mean = total as f64 / draws as f64;
        assert!((mean - 1.6).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn rho_zero_span_is_all_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<u32> = (4..44).collect();
        let cfg = CorruptionConfig { rho: 0.0, ..CorruptionConfig::default() };
        let ex = make_stage1_example(&x, &cfg, &space(), &mut rng).unwrap();
        assert!(ex.input[ex.split..ex.split + ex.k].iter().all(|&t| t == 3));
        assert!(ex.diff_flags[ex.split..ex.split + ex.k].iter().all(|&f| f));
    }

    #[test]
    fn full_restoration_recovers_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<u32> = (4..44).collect();
        let cfg = CorruptionConfig { rho: 1.0, restore_gt_frac: 1.0, ..CorruptionConfig::default() };
        let ex = make_stage1_example(&x, &cfg, &space(), &mut rng).unwrap();
        assert_eq!(ex.input, ex.targets);
        let flagged = ex.diff_flags.iter().filter(|&&f| f).count();
        assert_eq!(flagged, ex.k, "diff flags still cover the span");
    }

    #[test]
    fn example_agrees_with_targets_outside_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<u32> = (0..60).map(|i| 4 + (i % 40) as u32).collect();
        for _ in 0..200 {
            let ex = make_stage1_example(&x, &CorruptionConfig::default(), &space(), &mut rng)
                .unwrap();
            for p in 0..x.len() {
                let in_span = p >= ex.split && p < ex.split + ex.k;
                if !in_span {
                    assert_eq!(ex.input[p], ex.targets[p]);
                }
                assert!(!(ex.ar_flags[p] && ex.diff_flags[p]), "flag sets must be disjoint");
                // Span never contains pad (0) or bos (1).
                if in_span {
                    assert!(ex.input[p] == 3 || ex.input[p] >= 4);
                }
            }
            assert_eq!(ex.diff_flags.iter().filter(|&&f| f).count(), ex.k);
            let ar_count = ex.ar_flags.iter().filter(|&&f| f).count();
            assert_eq!(ar_count, ex.split - 1);
        }
    }

    #[test]
    fn too_short_sequence_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<u32> = (4..20).collect(); // 16 < k_max + 2
        let err = make_stage1_example(&x, &CorruptionConfig::default(), &space(), &mut rng);
        assert!(matches!(err, Err(DiffusionError::SequenceTooShort { .. })));
    }
}
