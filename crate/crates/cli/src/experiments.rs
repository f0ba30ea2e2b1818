//! Desk-scale experiment analogs: first-pass accuracy decay over lookahead,
//! the entropy/horizon relationship, and the attention x decoder grid with
//! its accuracy and efficiency metrics.

use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use cdlm_core::corpus::{Document, Regime, TokenId, Vocabulary};
use cdlm_core::infer::{
    forward_block, generate, plan_probe, AttentionKind, DecodeConfig, DecodeMode, KvCache,
    WindowVis,
};
use cdlm_core::model::{Backbone, KHead};
use cdlm_core::stats::{mean, spearman, RankCorrelation};
use cdlm_core::train::{run_training, Stage, TrainRun};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{train_attention, AppConfig};
use crate::report::{ConditionRow, ExperimentReport};

// ── First-pass accuracy vs lookahead ─────────────────────────────────

#[derive(Debug, Clone)]
pub struct FirstPassCell {
    pub offset: usize,
    pub regime: Regime,
    pub hits: usize,
    pub total: usize,
}

impl FirstPassCell {
    pub fn accuracy(&self) -> f64 {
        self.hits as f64 / self.total.max(1) as f64
    }
}

/// Mask `k_max` positions after a sampled prefix, run a single sweep, and
/// score the argmax at every lookahead offset against the ground truth,
/// aggregated by the regime label of the target position.
pub fn firstpass_experiment(
    backbone: &Backbone<f32>,
    docs: &[Document],
    k_max: usize,
    n_probes: usize,
    seed: u64,
    attention: AttentionKind,
) -> Vec<FirstPassCell> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eligible: Vec<&Document> =
        docs.iter().filter(|d| d.tokens.len() >= k_max + 2).collect();
    assert!(!eligible.is_empty(), "no document long enough to probe");
    let probes: Vec<(&Document, usize)> = (0..n_probes)
        .map(|_| {
            let doc = eligible[rng.gen_range(0..eligible.len())];
            let t = rng.gen_range(1..=doc.tokens.len() - k_max);
            (doc, t)
        })
        .collect();

    let suppressed = [
        cdlm_core::corpus::PAD_ID,
        cdlm_core::corpus::BOS_ID,
        cdlm_core::corpus::MASK_ID,
    ];
    let per_probe: Vec<Vec<(usize, Regime, bool)>> = probes
        .par_iter()
        .map(|&(doc, t)| {
            let mut input = doc.tokens[..t].to_vec();
            input.extend(std::iter::repeat(cdlm_core::corpus::MASK_ID).take(k_max));
            let mut cache = KvCache::new(backbone.cfg.n_layers);
            let vis = WindowVis {
                active_start: t,
                window_end: t + k_max,
                bidirectional: matches!(attention, AttentionKind::BidirectionalWindow),
            };
            let block =
                forward_block(backbone, &mut cache, &input, 0, vis, 0, t - 1).expect("probe fits");
            let vocab = backbone.cfg.vocab_size;
            (0..k_max)
                .map(|j| {
                    let row = block.logits_row(t - 1 + j, vocab);
                    let mut best = usize::MAX;
                    let mut best_v = f32::NEG_INFINITY;
                    for (id, &v) in row.iter().enumerate() {
                        if suppressed.contains(&(id as TokenId)) {
                            continue;
                        }
                        if v > best_v {
                            best_v = v;
                            best = id;
                        }
                    }
                    let truth = doc.tokens[t + j];
                    let regime = doc.regime_at(t + j).expect("labels cover the document");
                    (j + 1, regime, best as TokenId == truth)
                })
                .collect()
        })
        .collect();

    let mut cells: Vec<FirstPassCell> = Vec::new();
    for (offset, regime) in
        (1..=k_max).flat_map(|o| [Regime::Low, Regime::High].map(move |r| (o, r)))
    {
        cells.push(FirstPassCell { offset, regime, hits: 0, total: 0 });
    }
    for rows in per_probe {
        for (offset, regime, hit) in rows {
            let cell = cells
                .iter_mut()
                .find(|c| c.offset == offset && c.regime == regime)
                .expect("cell exists");
            cell.total += 1;
            cell.hits += usize::from(hit);
        }
    }
    cells
}

pub fn write_firstpass_csv(path: &Path, config_hash: &str, cells: &[FirstPassCell]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# experiment=firstpass config_hash={config_hash}")?;
    writeln!(f, "offset,regime,hits,total,accuracy")?;
    for c in cells {
        let regime = match c.regime {
            Regime::Low => "low",
            Regime::High => "high",
        };
        writeln!(f, "{},{},{},{},{}", c.offset, regime, c.hits, c.total, c.accuracy())?;
    }
    Ok(())
}

// ── Entropy vs planned horizon ───────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PlanSample {
    pub doc: usize,
    pub t: usize,
    pub entropy: f64,
    pub k: usize,
    pub regime: Regime,
}

#[derive(Debug)]
pub struct EntropyKReport {
    pub samples: Vec<PlanSample>,
    pub correlation: RankCorrelation,
    pub mean_k_low: f64,
    pub mean_k_high: f64,
}

/// Teacher-forced planning probes: with the document prefix committed,
/// record the planning-time predictive entropy and the horizon the head
/// picks, labeled by the regime of the next position.
pub fn entropy_k_experiment(
    backbone: &Backbone<f32>,
    khead: &KHead<f32>,
    docs: &[Document],
    probes_per_doc: usize,
    seed: u64,
) -> EntropyKReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for (di, doc) in docs.iter().enumerate() {
        if doc.tokens.len() < 2 {
            continue;
        }
        for _ in 0..probes_per_doc {
            jobs.push((di, rng.gen_range(1..doc.tokens.len())));
        }
    }
    let samples: Vec<PlanSample> = jobs
        .par_iter()
        .map(|&(di, t)| {
            let doc = &docs[di];
            let (entropy, k) = plan_probe(backbone, khead, &doc.tokens[..t]).expect("probe fits");
            PlanSample { doc: di, t, entropy, k, regime: doc.regime_at(t).expect("labeled") }
        })
        .collect();

    let ent: Vec<f64> = samples.iter().map(|s| s.entropy).collect();
    let ks: Vec<f64> = samples.iter().map(|s| s.k as f64).collect();
    let correlation = spearman(&ent, &ks);
    let k_low: Vec<f64> = samples
        .iter()
        .filter(|s| s.regime == Regime::Low)
        .map(|s| s.k as f64)
        .collect();
    let k_high: Vec<f64> = samples
        .iter()
        .filter(|s| s.regime == Regime::High)
        .map(|s| s.k as f64)
        .collect();
    EntropyKReport {
        samples,
        correlation,
        mean_k_low: mean(&k_low),
        mean_k_high: mean(&k_high),
    }
}

pub fn write_entropy_k_csv(path: &Path, config_hash: &str, report: &EntropyKReport) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    let rho = report.correlation.rho;
    let p = report.correlation.p_one_sided;
    writeln!(
        f,
        "# experiment=entropyk config_hash={config_hash} spearman_rho={rho} p_one_sided={p} mean_k_low={} mean_k_high={}",
        report.mean_k_low, report.mean_k_high
    )?;
    writeln!(f, "doc,t,entropy,k,regime")?;
    for s in &report.samples {
        let regime = match s.regime {
            Regime::Low => "low",
            Regime::High => "high",
        };
        writeln!(f, "{},{},{},{},{}", s.doc, s.t, s.entropy, s.k, regime)?;
    }
    Ok(())
}

// ── Arithmetic exact-match evaluation ────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalStats {
    pub accuracy: f64,
    pub fpt: f64,
    pub tokens_per_sec: f64,
    pub mean_k: f64,
    pub mean_delta: f64,
    pub n_items: usize,
}

struct EvalItem {
    prompt: Vec<TokenId>,
    expected: Vec<TokenId>,
}

/// One evaluation item per `a+b=` occurrence: the prompt runs through the
/// `=` sign, the expected continuation is the answer digits plus `;`.
fn collect_items(vocab: &Vocabulary, docs: &[Document], max_prompt: usize) -> Vec<EvalItem> {
    let eq = vocab.tokenize("=").unwrap()[0];
    let semi = vocab.tokenize(";").unwrap()[0];
    let mut items = Vec::new();
    for doc in docs {
        let mut i = 0;
        while i < doc.tokens.len() {
            if doc.tokens[i] == eq {
                let mut j = i + 1;
                while j < doc.tokens.len() && doc.tokens[j] != semi {
                    j += 1;
                }
                if j < doc.tokens.len() && i + 1 <= max_prompt {
                    items.push(EvalItem {
                        prompt: doc.tokens[..=i].to_vec(),
                        expected: doc.tokens[i + 1..=j].to_vec(),
                    });
                }
                i = j + 1;
            } else {
                i += 1;
            }
        }
    }
    items
}

/// Decode every item and score exact answers alongside efficiency metrics.
pub fn eval_arithmetic(
    backbone: &Backbone<f32>,
    khead: &KHead<f32>,
    vocab: &Vocabulary,
    docs: &[Document],
    mode: DecodeMode,
    gamma: f64,
    attention: AttentionKind,
    use_cache: bool,
    max_new: usize,
    max_items: usize,
) -> Result<EvalStats> {
    let max_prompt = backbone.cfg.max_seq_len.saturating_sub(max_new + 1);
    let mut items = collect_items(vocab, docs, max_prompt);
    items.truncate(max_items);
    anyhow::ensure!(!items.is_empty(), "no evaluation items fit the model's sequence length");

    let started = Instant::now();
    let results: Vec<(bool, usize, usize, Vec<usize>, Vec<usize>)> = items
        .par_iter()
        .map(|item| {
            let mut cfg = DecodeConfig::new(mode, item.prompt.len() + max_new);
            cfg.gamma = gamma;
            cfg.attention = attention;
            cfg.use_cache = use_cache;
            cfg.eos_id = None;
            let out = generate(backbone, Some(khead), &item.prompt, &cfg).expect("decode");
            let generated = &out.tokens[item.prompt.len()..];
            let hit = generated.len() >= item.expected.len()
                && generated[..item.expected.len()] == item.expected[..];
            let planned: Vec<usize> = {
                let mut per_outer: Vec<usize> = Vec::new();
                let mut seen = usize::MAX;
                for ev in &out.events {
                    if ev.outer != seen {
                        per_outer.push(ev.planned_k);
                        seen = ev.outer;
                    }
                }
                per_outer
            };
            let deltas: Vec<usize> = out.events.iter().map(|e| e.delta).collect();
            (hit, out.forward_passes, out.new_tokens(), planned, deltas)
        })
        .collect();
    let elapsed = started.elapsed().as_secs_f64();

    let n = results.len();
    let hits = results.iter().filter(|r| r.0).count();
    let total_fp: usize = results.iter().map(|r| r.1).sum();
    let total_tokens: usize = results.iter().map(|r| r.2).sum();
    let all_k: Vec<f64> =
        results.iter().flat_map(|r| r.3.iter().map(|&k| k as f64)).collect();
    let all_d: Vec<f64> =
        results.iter().flat_map(|r| r.4.iter().map(|&d| d as f64)).collect();

    Ok(EvalStats {
        accuracy: hits as f64 / n as f64,
        fpt: total_fp as f64 / total_tokens.max(1) as f64,
        tokens_per_sec: total_tokens as f64 / elapsed.max(1e-9),
        mean_k: mean(&all_k),
        mean_delta: mean(&all_d),
        n_items: n,
    })
}

// ── Ablation grid ────────────────────────────────────────────────────

pub struct AblationArgs<'a> {
    pub cfg: &'a AppConfig,
    pub seeds: Vec<u64>,
    pub workdir: &'a Path,
    pub eval_items: usize,
}

/// Train matched checkpoints per attention mode and seed, then evaluate the
/// {causal, bidirectional} x {elastic, fixed, ar} grid on held-out
/// arithmetic items.
pub fn ablate_experiment(args: &AblationArgs) -> Result<ExperimentReport> {
    let cfg = args.cfg;
    let vocab = Vocabulary::default();
    let eval_docs = cdlm_core::corpus::build_arithmetic_corpus(
        &vocab,
        cfg.seed ^ 0x5EED_EA7,
        cfg.corpus.n_docs.max(32) / 2,
        cfg.corpus.digits,
    );
    let max_new = cfg.corpus.digits as usize + 3;

    let mut rows = Vec::new();
    for &seed in &args.seeds {
        let docs = cfg.build_corpus(&vocab, seed)?;
        for attention in [AttentionKind::Causal, AttentionKind::BidirectionalWindow] {
            let att_name = match attention {
                AttentionKind::Causal => "causal",
                AttentionKind::BidirectionalWindow => "bidirectional",
            };
            let mut stage1 = cfg.stage1.clone();
            stage1.attention = train_attention(attention);
            let mut stage2 = cfg.stage2.clone();
            stage2.attention = train_attention(attention);

            let s1_path = args.workdir.join(format!("ablate-{att_name}-{seed}-s1.ckpt"));
            let s2_path = args.workdir.join(format!("ablate-{att_name}-{seed}-s2.ckpt"));
            let base = TrainRun {
                stage: Stage::One,
                model: cfg.model.clone(),
                stage1: stage1.clone(),
                stage2: stage2.clone(),
                seed,
                start_step: 0,
                stop_after: None,
                log_every: usize::MAX,
                checkpoint_every: 0,
                docs: &docs,
                vocab: &vocab,
                checkpoint_in: None,
                checkpoint_out: &s1_path,
                metrics_out: None,
                config_hash: cfg.hash(),
            };
            run_training(&base).context("ablation stage 1")?;
            let stage2_run = TrainRun {
                stage: Stage::Two,
                checkpoint_in: Some(&s1_path),
                checkpoint_out: &s2_path,
                ..base
            };
            run_training(&stage2_run).context("ablation stage 2")?;
            let (backbone, khead) = cdlm_core::model::load_checkpoint(&s2_path)?;

            for (dec_name, mode) in [
                ("elastic", DecodeMode::Elastic),
                ("fixed", DecodeMode::FixedBlock(cfg.model.k_max)),
                ("ar", DecodeMode::ArGreedy),
            ] {
                let stats = eval_arithmetic(
                    &backbone,
                    &khead,
                    &vocab,
                    &eval_docs,
                    mode,
                    cfg.decode.gamma,
                    attention,
                    cfg.decode.cache,
                    max_new,
                    args.eval_items,
                )?;
                rows.push(ConditionRow {
                    condition: format!("{att_name}+{dec_name}"),
                    attention: att_name.into(),
                    decoder: dec_name.into(),
                    seed,
                    accuracy: stats.accuracy,
                    fpt: stats.fpt,
                    tokens_per_sec: stats.tokens_per_sec,
                    mean_k: stats.mean_k,
                    mean_delta: stats.mean_delta,
                    n_items: stats.n_items,
                });
            }
        }
    }
    Ok(ExperimentReport {
        experiment: "ablation".into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        rows,
    })
}

/// Seed-averaged accuracy for one grid condition.
pub fn mean_accuracy(report: &ExperimentReport, condition: &str) -> f64 {
    let acc: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.condition == condition)
        .map(|r| r.accuracy)
        .collect();
    mean(&acc)
}
