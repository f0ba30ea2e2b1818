//! End-to-end training-loop contracts: determinism, resume, checkpointing,
//! and the metrics stream.

use std::path::Path;

use cdlm_core::corpus::{build_arithmetic_corpus, Vocabulary};
use cdlm_core::model::{load_checkpoint, ModelConfig};
use cdlm_core::train::{run_training, Stage, Stage1Config, Stage2Config, TrainRun};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 45,
        max_seq_len: 64,
        k_max: 8,
        khead_hidden: 24,
    }
}

fn tiny_stage1(steps: usize) -> Stage1Config {
    Stage1Config { steps, batch_size: 4, seq_len: 64, lr: 1e-3, k_max: 8, ..Stage1Config::default() }
}

fn run<'a>(
    stage: Stage,
    steps: usize,
    start_step: usize,
    docs: &'a [cdlm_core::Document],
    vocab: &'a Vocabulary,
    ckpt_in: Option<&'a Path>,
    ckpt_out: &'a Path,
    metrics: Option<&'a Path>,
) -> TrainRun<'a> {
    TrainRun {
        stage,
        model: tiny_model(),
        stage1: tiny_stage1(steps),
        stage2: Stage2Config {
            steps,
            k_max: 8,
            batch_size: 4,
            seq_len: 64,
            lr: 2e-3,
            ..Stage2Config::default()
        },
        seed: 42,
        start_step,
        stop_after: None,
        log_every: 1,
        checkpoint_every: 0,
        docs,
        vocab,
        checkpoint_in: ckpt_in,
        checkpoint_out: ckpt_out,
        metrics_out: metrics,
        config_hash: "deadbeef".into(),
    }
}

#[test]
fn identical_seeds_produce_identical_checkpoints() {
    let vocab = Vocabulary::default();
    let docs = build_arithmetic_corpus(&vocab, 3, 16, 1);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    run_training(&run(Stage::One, 12, 0, &docs, &vocab, None, &a, None)).unwrap();
    run_training(&run(Stage::One, 12, 0, &docs, &vocab, None, &b, None)).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn resume_reproduces_next_step_loss_bit_exactly() {
    let vocab = Vocabulary::default();
    let docs = build_arithmetic_corpus(&vocab, 3, 16, 1);
    let dir = tempfile::tempdir().unwrap();

    // Uninterrupted run of 9 steps; the loss logged at step 8 is the target.
    let full_out = dir.path().join("full.ckpt");
    let full = run_training(&run(Stage::One, 9, 0, &docs, &vocab, None, &full_out, None)).unwrap();
    let expect = full.logs.iter().find(|l| l.step == 8).unwrap();

    // The same 9-step schedule interrupted after 8 steps, then resumed.
    let part_out = dir.path().join("part.ckpt");
    let mut part = run(Stage::One, 9, 0, &docs, &vocab, None, &part_out, None);
    part.stop_after = Some(8);
    run_training(&part).unwrap();
    let resumed_out = dir.path().join("resumed.ckpt");
    let resumed = run_training(&run(
        Stage::One,
        9,
        8,
        &docs,
        &vocab,
        Some(&part_out),
        &resumed_out,
        None,
    ))
    .unwrap();
    let got = resumed.logs.iter().find(|l| l.step == 8).unwrap();

    assert_eq!(expect.l_ar.to_bits(), got.l_ar.to_bits(), "l_ar must match bit-exactly");
    assert_eq!(expect.l_diff.to_bits(), got.l_diff.to_bits());
}

#[test]
fn stage2_preserves_every_backbone_tensor_in_checkpoint() {
    let vocab = Vocabulary::default();
    let docs = build_arithmetic_corpus(&vocab, 5, 16, 1);
    let dir = tempfile::tempdir().unwrap();
    let s1 = dir.path().join("s1.ckpt");
    run_training(&run(Stage::One, 10, 0, &docs, &vocab, None, &s1, None)).unwrap();
    let s2 = dir.path().join("s2.ckpt");
    run_training(&run(Stage::Two, 10, 0, &docs, &vocab, Some(&s1), &s2, None)).unwrap();

    let (bb1, kh1) = load_checkpoint(&s1).unwrap();
    let (bb2, kh2) = load_checkpoint(&s2).unwrap();
    let mut before = Vec::new();
    bb1.visit_params(&mut |name, t| before.push((name, t.data().to_vec())));
    let mut idx = 0;
    bb2.visit_params(&mut |name, t| {
        assert_eq!(before[idx].0, name);
        assert_eq!(before[idx].1, t.data(), "stage 2 modified backbone tensor {name}");
        idx += 1;
    });
    assert_ne!(kh1.w2.data(), kh2.w2.data(), "horizon head must actually train");
}

#[test]
fn metrics_csv_has_header_hash_and_expected_rows() {
    let vocab = Vocabulary::default();
    let docs = build_arithmetic_corpus(&vocab, 7, 16, 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.ckpt");
    let metrics = dir.path().join("metrics.csv");
    let mut cfg = run(Stage::One, 10, 0, &docs, &vocab, None, &out, Some(&metrics));
    cfg.log_every = 2;
    run_training(&cfg).unwrap();
    let text = std::fs::read_to_string(&metrics).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "# config_hash=deadbeef");
    assert_eq!(lines.next().unwrap(), "step,stage,l_ar,l_diff,kl,lr,seconds");
    let rows: Vec<&str> = lines.collect();
    // Steps 0,2,4,6,8 from log_every plus the final step 9.
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("0,1,"));
    assert!(rows[5].starts_with("9,1,"));
}

#[test]
fn periodic_checkpoints_are_written() {
    let vocab = Vocabulary::default();
    let docs = build_arithmetic_corpus(&vocab, 9, 16, 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.ckpt");
    let mut cfg = run(Stage::One, 7, 0, &docs, &vocab, None, &out, None);
    cfg.checkpoint_every = 3;
    run_training(&cfg).unwrap();
    assert!(out.exists());
    load_checkpoint(&out).unwrap();
}
