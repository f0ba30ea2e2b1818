// Scratch: calibrate the acceptance fixture (training budget, thresholds).
use std::time::Instant;

use cdlm_cli::experiments::*;
use cdlm_core::corpus::*;
use cdlm_core::infer::*;
use cdlm_core::model::*;
use cdlm_core::train::*;

fn main() {
    let vocab = Vocabulary::default();
    let model = ModelConfig {
        n_layers: 3,
        d_model: 96,
        n_heads: 4,
        d_ff: 384,
        vocab_size: vocab.size(),
        max_seq_len: 256,
        k_max: 16,
        khead_hidden: 96,
    };
    let docs = build_mixed_corpus(&vocab, 11, 300, 1, 24);
    let stage1 = Stage1Config { steps: 1500, lr: 1e-3, batch_size: 8, seq_len: 144, ..Stage1Config::default() };
    let stage2 = Stage2Config { steps: 400, lr: 2e-3, batch_size: 8, seq_len: 144, ..Stage2Config::default() };
    let dir = std::path::PathBuf::from("/tmp/fixture");
    std::fs::create_dir_all(&dir).unwrap();
    let s1 = dir.join("s1.ckpt");
    let s2 = dir.join("s2.ckpt");

    let t0 = Instant::now();
    let run1 = TrainRun {
        stage: Stage::One, model: model.clone(), stage1: stage1.clone(), stage2: stage2.clone(),
        seed: 11, start_step: 0, stop_after: None, log_every: 100, checkpoint_every: 0,
        docs: &docs, vocab: &vocab, checkpoint_in: None, checkpoint_out: &s1, metrics_out: None,
        config_hash: "probe".into(),
    };
    let sum1 = run_training(&run1).unwrap();
    println!("stage1 {:.1}s; loss trajectory:", t0.elapsed().as_secs_f64());
    for l in &sum1.logs {
        println!("  step {:4} l_ar {:.3} l_diff {:.3} total {:.3}", l.step, l.l_ar, l.l_diff, l.l_ar + l.l_diff);
    }

    let t0 = Instant::now();
    let run2 = TrainRun { stage: Stage::Two, checkpoint_in: Some(&s1), checkpoint_out: &s2, ..run1 };
    let sum2 = run_training(&run2).unwrap();
    println!("stage2 {:.1}s; KL trajectory:", t0.elapsed().as_secs_f64());
    for l in sum2.logs.iter().step_by(2) {
        println!("  step {:4} kl {:.4}", l.step, l.kl);
    }

    let (backbone, khead) = load_checkpoint(&s2).unwrap();

    // Criterion 7 analog: first-pass decay.
    let t0 = Instant::now();
    let probe_docs = build_mixed_corpus(&vocab, 77, 120, 1, 24);
    let cells = firstpass_experiment(&backbone, &probe_docs, 16, 12_000, 3, AttentionKind::Causal);
    println!("firstpass ({:.1}s):", t0.elapsed().as_secs_f64());
    for c in &cells {
        println!("  offset {:2} {:?} acc {:.3} (n={})", c.offset, c.regime, c.accuracy(), c.total);
    }

    // Criterion 8 analog: entropy vs K on markov corpus.
    let t0 = Instant::now();
    let markov = build_markov_corpus(&vocab, 99, 60, 24);
    let ek = entropy_k_experiment(&backbone, &khead, &markov, 8, 5);
    println!(
        "entropyk ({:.1}s): rho {:.3} p {:.2e} meanK low {:.2} high {:.2} (n={})",
        t0.elapsed().as_secs_f64(), ek.correlation.rho, ek.correlation.p_one_sided,
        ek.mean_k_low, ek.mean_k_high, ek.samples.len()
    );

    // Criterion 9: elastic fpt and accuracy vs ar on arithmetic items.
    let eval_docs = build_arithmetic_corpus(&vocab, 1234, 80, 1);
    for (name, mode) in [("elastic", DecodeMode::Elastic), ("ar", DecodeMode::ArGreedy), ("fixed16", DecodeMode::FixedBlock(16))] {
        let t0 = Instant::now();
        let stats = eval_arithmetic(&backbone, &khead, &vocab, &eval_docs, mode, 0.9, AttentionKind::Causal, true, 4, 200).unwrap();
        println!(
            "eval {name}: acc {:.3} fpt {:.3} tok/s {:.0} meanK {:.2} meanD {:.2} n {} ({:.1}s)",
            stats.accuracy, stats.fpt, stats.tokens_per_sec, stats.mean_k, stats.mean_delta, stats.n_items,
            t0.elapsed().as_secs_f64()
        );
    }

    // Criterion 11: tau sweep on a fixed probe set.
    let probe_set: Vec<(usize, usize)> = {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        (0..300).map(|_| {
            let di = rng.gen_range(0..markov.len());
            let t = rng.gen_range(1..=markov[di].tokens.len() - 16);
            (di, t)
        }).collect()
    };
    for tau in [2.0, 2.8, 4.0] {
        let mut total = 0usize;
        for &(di, t) in &probe_set {
            let probe = probe_future_losses(&backbone, &markov[di].tokens, t, 16, TrainAttention::Causal).unwrap();
            total += oracle_k(&probe.losses, tau);
        }
        println!("tau {tau}: mean K* {:.3}", total as f64 / probe_set.len() as f64);
    }
}
