//! Two-stage training curriculum.
//!
//! Stage one fine-tunes the backbone with a hybrid objective: next-token
//! cross-entropy over the clean history plus weighted cross-entropy over a
//! corrupted span, under the causal (or window-ablated) mask. The horizon
//! head is untouched.
//!
//! Stage two freezes the backbone and calibrates the horizon head: probe
//! positions get a full mask span appended, the probed per-position losses
//! define a competence boundary `K*`, and the head is trained to match a
//! Gaussian soft target centered there by minimizing KL divergence.

mod optim;

pub use optim::{clip_global_norm, lr_at, AdamW, OptimConfig};

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{Batch, Batcher, Document, TokenId, Vocabulary};
use crate::diffusion::{
    loss_weight_clamped, make_stage1_example, AttentionMask, CorruptionConfig, DiffusionError,
    MaskMode, TokenSpace, TrainingExample,
};
use crate::infer::{forward_block, KvCache, WindowVis};
use crate::model::{
    load_checkpoint, save_checkpoint, Backbone, BackboneVars, KHead, ModelConfig, ModelError,
};
use crate::numerics::{kernels, scalar, NumericsError, Scalar, Tape, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage 2 requires a stage-1 checkpoint")]
    MissingCheckpoint,
    #[error("no sequence in the batch is usable at step {step}")]
    EmptyBatch { step: usize },
    #[error("probe position {t} invalid: need 1 <= t and t + {k_max} <= {len}")]
    ProbeOutOfRange { t: usize, k_max: usize, len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Attention regime used during training and probing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrainAttention {
    Causal,
    /// The corrupted span (stage one) or probe span (stage two) is mutually
    /// visible; everything else stays causal. Ablation baseline.
    BidirectionalSpan,
}

// ── Configs ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub rho: f64,
    pub restore_gt_frac: f64,
    pub k_max: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seq_len: usize,
    pub weight_clamp: f64,
    pub attention: TrainAttention,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            lr: 2e-4,
            warmup_ratio: 0.1,
            batch_size: 8,
            steps: 2000,
            rho: 0.10,
            restore_gt_frac: 0.5,
            k_max: 16,
            grad_clip: 1.0,
            weight_decay: 0.01,
            seq_len: 128,
            weight_clamp: 100.0,
            attention: TrainAttention::Causal,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub tau: f64,
    pub sigma: f64,
    pub steps: usize,
    pub probes_per_seq: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub k_max: usize,
    pub seq_len: usize,
    pub attention: TrainAttention,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            tau: 2.8,
            sigma: 1.0,
            steps: 500,
            probes_per_seq: 4,
            lr: 1e-3,
            warmup_ratio: 0.1,
            batch_size: 8,
            grad_clip: 1.0,
            k_max: 16,
            seq_len: 128,
            attention: TrainAttention::Causal,
        }
    }
}

// ── Competence boundary, soft targets, KL ────────────────────────────

/// Probed per-position negative log-likelihoods (nats) for the `K_max`
/// positions after `t`.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub losses: Vec<f64>,
    pub t: usize,
}

/// Gaussian soft target over horizons, centered at the competence boundary.
#[derive(Debug, Clone)]
pub struct SoftTarget {
    pub q: Vec<f64>,
    pub k_star: usize,
}

/// Largest `k` whose prefix-mean probed loss stays below `tau`; 1 when no
/// prefix qualifies (the safe token-by-token fallback).
pub fn oracle_k(losses: &[f64], tau: f64) -> usize {
    debug_assert!(tau > 0.0);
    let mut best = None;
    let mut acc = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        acc += l;
        if acc / ((i + 1) as f64) < tau {
            best = Some(i + 1);
        }
    }
    best.unwrap_or(1)
}

/// Truncated Gaussian kernel on the integers `1..=k_max`, renormalized.
pub fn soft_target(k_star: usize, sigma: f64, k_max: usize) -> SoftTarget {
    assert!(sigma > 0.0, "sigma must be positive");
    assert!((1..=k_max).contains(&k_star));
    let mut q: Vec<f64> = (1..=k_max)
        .map(|k| {
            let d = k as f64 - k_star as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = q.iter().sum();
    for v in q.iter_mut() {
        *v /= total;
    }
    SoftTarget { q, k_star }
}

/// `KL(Q || P) = sum_k Q(k) ln(Q(k)/P(k))`, with `0 ln 0 = 0`. `P` must be
/// strictly positive (softmax output).
pub fn kl_div(q: &[f64], p: &[f64]) -> f64 {
    debug_assert_eq!(q.len(), p.len());
    q.iter()
        .zip(p.iter())
        .filter(|(&qk, _)| qk > 0.0)
        .map(|(&qk, &pk)| qk * (qk / pk).ln())
        .sum()
}

fn entropy(q: &[f64]) -> f64 {
    q.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

// ── Stage-one loss graph ─────────────────────────────────────────────

pub struct Stage1LossNodes {
    pub l_ar: Option<Var>,
    pub l_diff: Var,
    pub total: Var,
}

/// Build the hybrid loss for one prepared example on an existing tape.
/// Shifted convention: logits row `i` scores the token at `i + 1`, so the
/// weight rows sit one position before their flagged targets.
pub fn stage1_example_loss<S: Scalar>(
    backbone: &Backbone<S>,
    tape: &mut Tape<S>,
    vars: &BackboneVars,
    ex: &TrainingExample,
    attention: TrainAttention,
    weight_clamp: f64,
    k_max: usize,
) -> Result<Stage1LossNodes> {
    let len = ex.input.len();
    let mask = match attention {
        TrainAttention::Causal => AttentionMask::causal(len),
        TrainAttention::BidirectionalSpan => AttentionMask::new(
            len,
            MaskMode::BidirectionalWindow { start: ex.split, end: ex.split + ex.k },
        )?,
    };
    let (logits, _hidden) = backbone.forward_on_tape(tape, vars, &ex.input, &mask)?;

    let mut targets = vec![0u32; len];
    for i in 0..len - 1 {
        targets[i] = ex.targets[i + 1];
    }
    let n_ar = ex.ar_flags.iter().filter(|&&f| f).count();
    let mut ar_w = vec![S::zero(); len];
    if n_ar > 0 {
        let w = scalar::<S>(1.0 / n_ar as f64);
        for p in 1..len {
            if ex.ar_flags[p] {
                ar_w[p - 1] = w;
            }
        }
    }
    let t = ex.k as f64 / k_max as f64;
    let w_t = loss_weight_clamped(t, weight_clamp)?;
    let mut diff_w = vec![S::zero(); len];
    let wd = scalar::<S>(w_t / ex.k as f64);
    for p in ex.split..ex.split + ex.k {
        diff_w[p - 1] = wd;
    }

    let l_diff = tape.cross_entropy_rows(logits, &targets, &diff_w)?;
    let l_ar = if n_ar > 0 {
        Some(tape.cross_entropy_rows(logits, &targets, &ar_w)?)
    } else {
        None
    };
    let total = match l_ar {
        Some(ar) => tape.add(ar, l_diff)?,
        None => l_diff,
    };
    Ok(Stage1LossNodes { l_ar, l_diff, total })
}

#[derive(Debug, Clone)]
pub struct Stage1Metrics {
    pub l_ar: f64,
    pub l_diff: f64,
    pub total: f64,
    pub n_examples: usize,
    /// Sequences shorter than `k_max + 2`, skipped.
    pub skipped_short: usize,
    /// Examples whose history had no next-token targets (split = 1); their
    /// autoregressive term was skipped.
    pub empty_ar: usize,
    pub grad_norm: f64,
}

/// One optimizer step of stage one over a batch. The horizon head is not an
/// input: it stays frozen by construction.
pub fn stage1_step<S: Scalar>(
    backbone: &mut Backbone<S>,
    opt: &mut AdamW<S>,
    batch: &Batch,
    cfg: &Stage1Config,
    space: &TokenSpace,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Stage1Metrics> {
    let corruption = CorruptionConfig {
        rho: cfg.rho,
        restore_gt_frac: cfg.restore_gt_frac,
        k_max: cfg.k_max,
    };
    let mut jobs: Vec<(&[TokenId], u64)> = Vec::new();
    let mut skipped_short = 0usize;
    for (row, &len) in batch.rows.iter().zip(batch.lens.iter()) {
        let seed = rng.gen::<u64>();
        if len < cfg.k_max + 2 {
            skipped_short += 1;
            continue;
        }
        jobs.push((&row[..len], seed));
    }
    if jobs.is_empty() {
        return Err(TrainError::EmptyBatch { step: 0 });
    }

    struct ExampleOut<S: Scalar> {
        grads: Vec<Vec<S>>,
        l_ar: Option<f64>,
        l_diff: f64,
    }

    let outs: Vec<Result<ExampleOut<S>>> = jobs
        .par_iter()
        .map(|&(seq, seed)| {
            let mut ex_rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = make_stage1_example(seq, &corruption, space, &mut ex_rng)?;
            let mut tape = Tape::new();
            let vars = backbone.register(&mut tape, true);
            let nodes = stage1_example_loss(
                backbone,
                &mut tape,
                &vars,
                &ex,
                cfg.attention,
                cfg.weight_clamp,
                cfg.k_max,
            )?;
            tape.backward(nodes.total)?;
            Ok(ExampleOut {
                grads: Backbone::collect_grads(&tape, &vars),
                l_ar: nodes.l_ar.map(|v| tape.scalar_of(v).to_f64().unwrap_or(f64::NAN)),
                l_diff: tape.scalar_of(nodes.l_diff).to_f64().unwrap_or(f64::NAN),
            })
        })
        .collect();

    let mut summed: Option<Vec<Vec<S>>> = None;
    let mut l_ar_sum = 0.0;
    let mut l_ar_n = 0usize;
    let mut l_diff_sum = 0.0;
    let n = outs.len();
    for out in outs {
        let out = out?;
        if let Some(v) = out.l_ar {
            l_ar_sum += v;
            l_ar_n += 1;
        }
        l_diff_sum += out.l_diff;
        match &mut summed {
            None => summed = Some(out.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(out.grads.iter()) {
                    for (av, &gv) in a.iter_mut().zip(g.iter()) {
                        *av = *av + gv;
                    }
                }
            }
        }
    }
    let mut grads = summed.expect("at least one example");
    let inv_n = scalar::<S>(1.0 / n as f64);
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v = *v * inv_n;
        }
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);

    opt.begin_step();
    let mut slot = 0usize;
    backbone.visit_params_mut(&mut |_, t| {
        opt.update(slot, t, &grads[slot], lr);
        slot += 1;
    });

    let l_ar = if l_ar_n > 0 { l_ar_sum / l_ar_n as f64 } else { 0.0 };
    let l_diff = l_diff_sum / n as f64;
    Ok(Stage1Metrics {
        l_ar,
        l_diff,
        total: l_ar + l_diff,
        n_examples: n,
        skipped_short,
        empty_ar: n - l_ar_n,
        grad_norm,
    })
}

// ── Probing ──────────────────────────────────────────────────────────

fn probe_vis(t: usize, k_max: usize, attention: TrainAttention) -> WindowVis {
    WindowVis {
        active_start: t,
        window_end: t + k_max,
        bidirectional: matches!(attention, TrainAttention::BidirectionalSpan),
    }
}

fn probe_with_hidden<S: Scalar>(
    backbone: &Backbone<S>,
    x: &[TokenId],
    t: usize,
    k_max: usize,
    attention: TrainAttention,
) -> Result<(ProbeResult, Vec<S>)> {
    if t < 1 || t + k_max > x.len() {
        return Err(TrainError::ProbeOutOfRange { t, k_max, len: x.len() });
    }
    let mut input = x[..t].to_vec();
    input.extend(std::iter::repeat(crate::corpus::MASK_ID).take(k_max));
    let mut cache = KvCache::new(backbone.cfg.n_layers);
    let block = forward_block(
        backbone,
        &mut cache,
        &input,
        0,
        probe_vis(t, k_max, attention),
        0,
        t - 1,
    )?;
    let vocab = backbone.cfg.vocab_size;
    let losses: Vec<f64> = (0..k_max)
        .map(|j| {
            let row = block.logits_row(t - 1 + j, vocab);
            let target = x[t + j] as usize;
            let lse = kernels::log_sum_exp(row);
            (lse - row[target]).to_f64().unwrap_or(f64::INFINITY)
        })
        .collect();
    let hidden = block.hidden_row(t - 1, backbone.cfg.d_model).to_vec();
    Ok((ProbeResult { losses, t }, hidden))
}

/// Insert the maximum mask span after `x[..t]` and read off the per-position
/// losses of the true continuation under one causal forward pass.
pub fn probe_future_losses<S: Scalar>(
    backbone: &Backbone<S>,
    x: &[TokenId],
    t: usize,
    k_max: usize,
    attention: TrainAttention,
) -> Result<ProbeResult> {
    probe_with_hidden(backbone, x, t, k_max, attention).map(|(p, _)| p)
}

// ── Stage two ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Stage2Metrics {
    pub kl: f64,
    pub n_probes: usize,
    pub mean_k_star: f64,
}

/// Build the stage-two KL loss for prepared `(hidden, target)` pairs on a
/// tape. Returns the loss node; its value minus the mean target entropy is
/// the mean KL divergence.
pub fn stage2_loss<S: Scalar>(
    khead: &KHead<S>,
    tape: &mut Tape<S>,
    vars: &crate::model::KHeadVars,
    hidden_rows: Var,
    targets: &[S],
    n_rows: usize,
) -> Result<Var> {
    let logits = khead.logits_on_tape(tape, vars, hidden_rows)?;
    let w = scalar::<S>(1.0 / n_rows as f64);
    let weights = vec![w; n_rows];
    Ok(tape.soft_cross_entropy_rows(logits, targets, &weights)?)
}

/// One optimizer step of stage two. The backbone is taken by shared
/// reference: freezing is structural, not a flag.
pub fn stage2_step<S: Scalar>(
    khead: &mut KHead<S>,
    backbone: &Backbone<S>,
    opt: &mut AdamW<S>,
    batch: &Batch,
    cfg: &Stage2Config,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Stage2Metrics> {
    let k_max = cfg.k_max;
    let mut jobs: Vec<(&[TokenId], usize)> = Vec::new();
    for (row, &len) in batch.rows.iter().zip(batch.lens.iter()) {
        if len < k_max + 1 {
            continue;
        }
        for _ in 0..cfg.probes_per_seq {
            let t = rng.gen_range(1..=len - k_max);
            jobs.push((&row[..len], t));
        }
    }
    if jobs.is_empty() {
        return Err(TrainError::EmptyBatch { step: 0 });
    }

    let probed: Vec<Result<(ProbeResult, Vec<S>)>> = jobs
        .par_iter()
        .map(|&(seq, t)| probe_with_hidden(backbone, seq, t, k_max, cfg.attention))
        .collect();

    let d = backbone.cfg.d_model;
    let n = probed.len();
    let mut hidden_flat = Vec::with_capacity(n * d);
    let mut q_flat = Vec::with_capacity(n * k_max);
    let mut h_q_sum = 0.0;
    let mut k_star_sum = 0usize;
    for res in probed {
        let (probe, hidden) = res?;
        let k_star = oracle_k(&probe.losses, cfg.tau);
        let target = soft_target(k_star, cfg.sigma, k_max);
        h_q_sum += entropy(&target.q);
        k_star_sum += k_star;
        hidden_flat.extend_from_slice(&hidden);
        q_flat.extend(target.q.iter().map(|&v| scalar::<S>(v)));
    }

    let mut tape = Tape::new();
    let hidden_rows = tape.constant(crate::numerics::Tensor::from_vec(&[n, d], hidden_flat));
    let vars = khead.register(&mut tape, true);
    let loss = stage2_loss(khead, &mut tape, &vars, hidden_rows, &q_flat, n)?;
    tape.backward(loss)?;
    let mut grads = KHead::collect_grads(&tape, &vars);
    clip_global_norm(&mut grads, cfg.grad_clip);
    opt.begin_step();
    let mut slot = 0usize;
    khead.visit_params_mut(&mut |_, t| {
        opt.update(slot, t, &grads[slot], lr);
        slot += 1;
    });

    let kl = tape.scalar_of(loss).to_f64().unwrap_or(f64::NAN) - h_q_sum / n as f64;
    Ok(Stage2Metrics { kl, n_probes: n, mean_k_star: k_star_sum as f64 / n as f64 })
}

// ── Full runs ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub stage: u8,
    pub l_ar: f64,
    pub l_diff: f64,
    pub kl: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub struct TrainRun<'a> {
    pub stage: Stage,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub seed: u64,
    /// First step to execute; resuming passes the step the checkpoint was
    /// written at so the data order continues exactly.
    pub start_step: usize,
    /// Execute at most up to this step (exclusive), emulating an interrupted
    /// run; the schedule still spans the full `steps`.
    pub stop_after: Option<usize>,
    pub log_every: usize,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub docs: &'a [Document],
    pub vocab: &'a Vocabulary,
    pub checkpoint_in: Option<&'a Path>,
    pub checkpoint_out: &'a Path,
    pub metrics_out: Option<&'a Path>,
    /// Hash of the run configuration, recorded in the metrics header.
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainingSummary {
    pub steps_run: usize,
    pub logs: Vec<StepLog>,
    /// Final total loss (stage one) or mean KL (stage two).
    pub final_metric: f64,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17),
    )
}

struct MetricsWriter {
    file: Option<std::fs::File>,
}

impl MetricsWriter {
    fn open(path: Option<&Path>, config_hash: &str) -> std::io::Result<Self> {
        use std::io::Write;
        let file = match path {
            None => None,
            Some(p) => {
                if p.exists() {
                    Some(std::fs::OpenOptions::new().append(true).open(p)?)
                } else {
                    let mut f = std::fs::File::create(p)?;
                    writeln!(f, "# config_hash={config_hash}")?;
                    writeln!(f, "step,stage,l_ar,l_diff,kl,lr,seconds")?;
                    Some(f)
                }
            }
        };
        Ok(MetricsWriter { file })
    }

    fn write(&mut self, log: &StepLog) -> std::io::Result<()> {
        use std::io::Write;
        if let Some(f) = &mut self.file {
            writeln!(
                f,
                "{},{},{:.6},{:.6},{:.6},{:.8},{:.3}",
                log.step, log.stage, log.l_ar, log.l_diff, log.kl, log.lr, log.seconds
            )?;
        }
        Ok(())
    }
}

/// Execute a training stage end to end: data order, schedule, periodic
/// checkpoints, and a metrics stream. Deterministic under `(seed, start_step)`.
pub fn run_training(run: &TrainRun) -> Result<TrainingSummary> {
    let started = Instant::now();
    let mut metrics = MetricsWriter::open(run.metrics_out, &run.config_hash)?;
    let mut logs = Vec::new();

    let (mut backbone, mut khead): (Backbone<f32>, KHead<f32>) = match (run.stage, run.checkpoint_in)
    {
        (Stage::One, None) => crate::model::init_params(&run.model, run.seed),
        (Stage::One, Some(path)) => load_checkpoint(path)?,
        (Stage::Two, Some(path)) => load_checkpoint(path)?,
        (Stage::Two, None) => return Err(TrainError::MissingCheckpoint),
    };

    let space = run.vocab.token_space();
    let mut opt = AdamW::new(OptimConfig {
        weight_decay: if run.stage == Stage::One { run.stage1.weight_decay } else { 0.0 },
        ..OptimConfig::default()
    });

    let (total_steps, batch_size, seq_len) = match run.stage {
        Stage::One => (run.stage1.steps, run.stage1.batch_size, run.stage1.seq_len),
        Stage::Two => (run.stage2.steps, run.stage2.batch_size, run.stage2.seq_len),
    };
    let mut batcher = Batcher::new(run.docs, batch_size, seq_len, run.seed);
    let mut final_metric = f64::NAN;
    let mut warned_empty_ar = false;
    let end_step = run.stop_after.map_or(total_steps, |s| s.min(total_steps));

    for step in run.start_step..end_step {
        let batch = batcher.batch_at(step);
        let mut rng = step_rng(run.seed, step);
        let log = match run.stage {
            Stage::One => {
                let lr = lr_at(step, total_steps, run.stage1.lr, run.stage1.warmup_ratio);
                let m = stage1_step(&mut backbone, &mut opt, &batch, &run.stage1, &space, lr, &mut rng)
                    .map_err(|e| match e {
                        TrainError::EmptyBatch { .. } => TrainError::EmptyBatch { step },
                        other => other,
                    })?;
                if m.empty_ar > 0 && !warned_empty_ar {
                    eprintln!(
                        "warning: {} example(s) had no history targets; autoregressive term skipped",
                        m.empty_ar
                    );
                    warned_empty_ar = true;
                }
                final_metric = m.total;
                StepLog {
                    step,
                    stage: 1,
                    l_ar: m.l_ar,
                    l_diff: m.l_diff,
                    kl: 0.0,
                    lr,
                    seconds: started.elapsed().as_secs_f64(),
                }
            }
            Stage::Two => {
                let lr = lr_at(step, total_steps, run.stage2.lr, run.stage2.warmup_ratio);
                let m = stage2_step(&mut khead, &backbone, &mut opt, &batch, &run.stage2, lr, &mut rng)
                    .map_err(|e| match e {
                        TrainError::EmptyBatch { .. } => TrainError::EmptyBatch { step },
                        other => other,
                    })?;
                final_metric = m.kl;
                StepLog {
                    step,
                    stage: 2,
                    l_ar: 0.0,
                    l_diff: 0.0,
                    kl: m.kl,
                    lr,
                    seconds: started.elapsed().as_secs_f64(),
                }
            }
        };
        let is_last = step + 1 == end_step;
        if step % run.log_every.max(1) == 0 || is_last {
            metrics.write(&log)?;
            logs.push(log);
        }
        if run.checkpoint_every > 0 && (step + 1) % run.checkpoint_every == 0 && !is_last {
            save_checkpoint(run.checkpoint_out, &backbone, &khead)?;
        }
    }

    save_checkpoint(run.checkpoint_out, &backbone, &khead)?;
    Ok(TrainingSummary {
        steps_run: end_step.saturating_sub(run.start_step),
        logs,
        final_metric,
    })
}

#[cfg(test)]
mod tests;
