use super::*;
use crate::corpus::Vocabulary;
use crate::diffusion::{loss_weight, make_stage1_example_at};
use crate::model::init_params;
use rand::Rng;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 45,
        max_seq_len: 64,
        k_max: 16,
        khead_hidden: 24,
    }
}

/// Independent route for the competence boundary: enumerate every k and test
/// the prefix-mean condition directly.
fn brute_force_k(losses: &[f64], tau: f64) -> usize {
    let qualifying: Vec<usize> = (1..=losses.len())
        .filter(|&k| {
            let mean: f64 = losses[..k].iter().sum::<f64>() / k as f64;
            mean < tau
        })
        .collect();
    qualifying.into_iter().max().unwrap_or(1)
}

#[test]
fn oracle_k_worked_example() {
    // Prefix means [1, 2, 3.33]: the last mean below 2.8 is at k = 2.
    assert_eq!(oracle_k(&[1.0, 3.0, 6.0], 2.8), 2);
}

#[test]
fn oracle_k_all_below_tau_gives_k_max() {
    let losses = vec![0.5; 16];
    assert_eq!(oracle_k(&losses, 2.8), 16);
}

#[test]
fn oracle_k_empty_set_floors_to_one() {
    let mut losses = vec![9.0; 16];
    losses[0] = 5.0;
    assert_eq!(oracle_k(&losses, 2.8), 1);
}

#[test]
fn oracle_k_matches_brute_force_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20_000 {
        let n = rng.gen_range(1..=16);
        let losses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..6.0)).collect();
        let tau = rng.gen_range(0.1..5.0);
        assert_eq!(oracle_k(&losses, tau), brute_force_k(&losses, tau));
    }
}

#[test]
fn oracle_k_monotone_in_tau() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for _ in 0..2_000 {
        let losses: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..6.0)).collect();
        let mut prev = 0;
        for i in 0..20 {
            let tau = 0.2 + i as f64 * 0.3;
            let k = oracle_k(&losses, tau);
            assert!(k >= prev, "K* must be non-decreasing in tau");
            prev = k;
        }
    }
}

#[test]
fn soft_target_shape_checks() {
    let st = soft_target(4, 1.0, 16);
    let total: f64 = st.q.iter().sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(st.k_star, 4);
    // Symmetry about K* and the e^{1/2} neighbor ratio.
    assert!((st.q[2] - st.q[4]).abs() < 1e-12, "Q(3) == Q(5)");
    assert!((st.q[3] / st.q[2] - 0.5f64.exp()).abs() < 1e-9);
    // Argmax at K*.
    let argmax = st.q.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
    assert_eq!(argmax + 1, 4);
}

#[test]
fn soft_target_tiny_sigma_is_one_hot() {
    let st = soft_target(7, 1e-6, 16);
    assert!((st.q[6] - 1.0).abs() < 1e-12);
    assert!(st.q.iter().enumerate().all(|(i, &v)| i == 6 || v == 0.0));
}

#[test]
fn soft_target_at_boundary_is_monotone() {
    let st = soft_target(1, 1.0, 16);
    for w in st.q.windows(2) {
        assert!(w[0] > w[1], "mass must decrease away from K* = 1");
    }
}

#[test]
fn soft_target_invariant_under_kernel_rescale() {
    // Renormalization makes the target invariant to positive rescaling of
    // the unnormalized kernel; equivalent check: doubling sigma^2 inside the
    // kernel then normalizing matches a direct construction.
    let direct = soft_target(5, 2.0, 16);
    let mut manual: Vec<f64> =
        (1..=16).map(|k| 3.0 * (-((k as f64 - 5.0).powi(2)) / 8.0).exp()).collect();
    let total: f64 = manual.iter().sum();
    for v in manual.iter_mut() {
        *v /= total;
    }
    for (a, b) in direct.q.iter().zip(manual.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn kl_div_reference_values() {
    let uniform = vec![1.0 / 16.0; 16];
    assert_eq!(kl_div(&uniform, &uniform), 0.0);
    let mut one_hot = vec![0.0; 16];
    one_hot[3] = 1.0;
    assert!((kl_div(&one_hot, &uniform) - 16f64.ln()).abs() < 1e-12);
}

#[test]
fn kl_div_nonnegative_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..2_000 {
        let draw = |rng: &mut ChaCha8Rng| {
            let mut v: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        };
        let q = draw(&mut rng);
        let p = draw(&mut rng);
        assert!(kl_div(&q, &p) >= -1e-12);
        assert!(kl_div(&q, &q).abs() < 1e-12);
    }
}

fn arithmetic_rows(vocab: &Vocabulary, n: usize) -> Vec<Vec<TokenId>> {
    crate::corpus::build_arithmetic_corpus(vocab, 5, n, 2)
        .into_iter()
        .map(|d| d.tokens)
        .collect()
}

#[test]
fn fresh_model_ar_loss_is_ln_vocab() {
    let vocab = Vocabulary::default();
    let cfg = small_cfg();
    let (backbone, _) = init_params::<f64>(&cfg, 1);
    let rows = arithmetic_rows(&vocab, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ex = make_stage1_example_at(
        &rows[0][..40],
        &CorruptionConfig::default(),
        &vocab.token_space(),
        8,
        20,
        &mut rng,
    );
    let mut tape = Tape::new();
    let vars = backbone.register(&mut tape, false);
    let nodes =
        stage1_example_loss(&backbone, &mut tape, &vars, &ex, TrainAttention::Causal, 100.0, 16)
            .unwrap();
    let l_ar = tape.scalar_of(nodes.l_ar.unwrap());
    let expected = (cfg.vocab_size as f64).ln();
    assert!(
        (l_ar - expected).abs() < 1e-9,
        "zero-headed model: l_ar {l_ar} vs ln(V) {expected}"
    );
}

#[test]
fn degenerate_full_restoration_equals_teacher_forced_ce() {
    // rho = 1, restore_gt_frac = 1, K = k_max: the span is visible ground
    // truth and the weight is 1, so l_diff is the plain mean CE on the span.
    let vocab = Vocabulary::default();
    let cfg = small_cfg();
    let (mut backbone, _) = init_params::<f32>(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for v in backbone.out_w.data_mut() {
        *v = rng.gen_range(-0.1..0.1);
    }
    let rows = arithmetic_rows(&vocab, 1);
    let seq = &rows[0][..40];
    let corruption = CorruptionConfig { rho: 1.0, restore_gt_frac: 1.0, k_max: 16 };
    let (k, split) = (16, 12);
    let ex =
        make_stage1_example_at(seq, &corruption, &vocab.token_space(), k, split, &mut rng);
    assert_eq!(ex.input, ex.targets);

    let mut tape = Tape::new();
    let vars = backbone.register(&mut tape, false);
    let nodes =
        stage1_example_loss(&backbone, &mut tape, &vars, &ex, TrainAttention::Causal, 100.0, 16)
            .unwrap();
    let l_diff = tape.scalar_of(nodes.l_diff) as f64;

    // Independent route: plain forward on the clean sequence, mean CE over
    // span rows.
    let out = backbone.forward(seq, &AttentionMask::causal(seq.len())).unwrap();
    let v = cfg.vocab_size;
    let mut manual = 0.0;
    for p in split..split + k {
        let row = &out.logits.data()[(p - 1) * v..p * v];
        let lse = kernels::log_sum_exp(row);
        manual += (lse - row[seq[p] as usize]) as f64;
    }
    manual /= k as f64;
    assert!((l_diff - manual).abs() < 1e-5, "{l_diff} vs {manual}");
}

#[test]
fn k1_rho0_degenerates_to_next_token_ce() {
    // With rho = 0 and K = 1 the unweighted span CE equals the plain
    // autoregressive CE at the split position: the mask sits at the target
    // position itself, which the causal predictor row never sees. The
    // reported l_diff carries the schedule weight w(1/k_max).
    let vocab = Vocabulary::default();
    let cfg = small_cfg();
    let (mut backbone, _) = init_params::<f32>(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for v in backbone.out_w.data_mut() {
        *v = rng.gen_range(-0.1..0.1);
    }
    let rows = arithmetic_rows(&vocab, 1);
    let seq = &rows[0][..40];
    let corruption = CorruptionConfig { rho: 0.0, restore_gt_frac: 0.5, k_max: 16 };
    let split = 17;
    let ex = make_stage1_example_at(seq, &corruption, &vocab.token_space(), 1, split, &mut rng);

    let mut tape = Tape::new();
    let vars = backbone.register(&mut tape, false);
    let nodes =
        stage1_example_loss(&backbone, &mut tape, &vars, &ex, TrainAttention::Causal, 100.0, 16)
            .unwrap();
    let l_diff = tape.scalar_of(nodes.l_diff) as f64;

    let out = backbone.forward(seq, &AttentionMask::causal(seq.len())).unwrap();
    let v = cfg.vocab_size;
    let row = &out.logits.data()[(split - 1) * v..split * v];
    let ar_ce = (kernels::log_sum_exp(row) - row[seq[split] as usize]) as f64;

    let w = loss_weight(1.0 / 16.0).unwrap();
    assert!((l_diff / w - ar_ce).abs() < 1e-5, "unweighted {} vs {ar_ce}", l_diff / w);
    assert!((l_diff - w * ar_ce).abs() < 1e-4);
}

#[test]
fn probe_matches_naive_reimplementation() {
    let vocab = Vocabulary::default();
    let cfg = small_cfg();
    let (mut backbone, _) = init_params::<f32>(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for v in backbone.out_w.data_mut() {
        *v = rng.gen_range(-0.2..0.2);
    }
    let rows = arithmetic_rows(&vocab, 1);
    let seq = &rows[0][..44];
    let t = 20;
    let probe = probe_future_losses(&backbone, seq, t, 16, TrainAttention::Causal).unwrap();
    assert_eq!(probe.losses.len(), 16);
    assert!(probe.losses.iter().all(|&l| l.is_finite() && l >= 0.0));

    // Naive second route: assemble the probe input by hand, run the tape
    // forward, take per-position CE.
    let mut input = seq[..t].to_vec();
    input.extend(std::iter::repeat(crate::corpus::MASK_ID).take(16));
    let out = backbone.forward(&input, &AttentionMask::causal(input.len())).unwrap();
    let v = cfg.vocab_size;
    for j in 0..16 {
        let row = &out.logits.data()[(t - 1 + j) * v..(t + j) * v];
        let ce = (kernels::log_sum_exp(row) - row[seq[t + j] as usize]) as f64;
        assert!(
            (ce - probe.losses[j]).abs() < 1e-6,
            "offset {j}: naive {ce} vs probe {}",
            probe.losses[j]
        );
    }

    // Causality: losses must not depend on tokens after t + K_max.
    let mut mutated = seq.to_vec();
    let last = mutated.len() - 1;
    mutated[last] = if mutated[last] == 4 { 5 } else { 4 };
    let probe2 = probe_future_losses(&backbone, &mutated, t, 16, TrainAttention::Causal).unwrap();
    assert_eq!(probe.losses, probe2.losses);
}

#[test]
fn probe_bounds_are_checked() {
    let cfg = small_cfg();
    let (backbone, _) = init_params::<f32>(&cfg, 6);
    let seq: Vec<u32> = (0..20).map(|i| 4 + i % 40).collect();
    assert!(matches!(
        probe_future_losses(&backbone, &seq, 10, 16, TrainAttention::Causal),
        Err(TrainError::ProbeOutOfRange { .. })
    ));
    assert!(matches!(
        probe_future_losses(&backbone, &seq, 0, 16, TrainAttention::Causal),
        Err(TrainError::ProbeOutOfRange { .. })
    ));
}

#[test]
fn stage2_step_leaves_backbone_untouched_and_reduces_kl() {
    let vocab = Vocabulary::default();
    let cfg = small_cfg();
    let (mut backbone, mut khead) = init_params::<f32>(&cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for v in backbone.out_w.data_mut() {
        *v = rng.gen_range(-0.2..0.2);
    }
    let before: Vec<Vec<f32>> = {
        let mut all = Vec::new();
        backbone.visit_params(&mut |_, t| all.push(t.data().to_vec()));
        all
    };

    let docs = crate::corpus::build_arithmetic_corpus(&vocab, 19, 24, 2);
    let mut batcher = Batcher::new(&docs, 8, 64, 0);
    let s2 = Stage2Config { steps: 60, lr: 5e-3, ..Stage2Config::default() };
    let mut opt = AdamW::new(OptimConfig { weight_decay: 0.0, ..OptimConfig::default() });
    let mut first_kl = None;
    let mut last_kl = f64::NAN;
    for step in 0..60 {
        let batch = batcher.batch_at(step);
        let mut rng = step_rng(123, step);
        let m = stage2_step(&mut khead, &backbone, &mut opt, &batch, &s2, 5e-3, &mut rng).unwrap();
        if first_kl.is_none() {
            first_kl = Some(m.kl);
        }
        last_kl = m.kl;
        assert!(m.kl >= -1e-9, "mean KL must be non-negative, got {}", m.kl);
    }
    assert!(
        last_kl < first_kl.unwrap(),
        "KL should decrease: {} -> {last_kl}",
        first_kl.unwrap()
    );

    let mut idx = 0;
    backbone.visit_params(&mut |name, t| {
        assert_eq!(before[idx], t.data(), "backbone tensor {name} changed during stage two");
        idx += 1;
    });
}

#[test]
fn stage1_loss_drops_on_tiny_run() {
    let vocab = Vocabulary::default();
    let cfg = small_cfg();
    let (mut backbone, _) = init_params::<f32>(&cfg, 12);
    let docs = crate::corpus::build_arithmetic_corpus(&vocab, 31, 32, 1);
    let mut batcher = Batcher::new(&docs, 8, 64, 1);
    let steps = 120;
    let s1 = Stage1Config { lr: 3e-3, steps, seq_len: 64, ..Stage1Config::default() };
    let mut opt = AdamW::new(OptimConfig::default());
    let space = vocab.token_space();
    let mut totals = Vec::new();
    let mut ars = Vec::new();
    for step in 0..steps {
        let batch = batcher.batch_at(step);
        let mut rng = step_rng(7, step);
        let lr = lr_at(step, steps, s1.lr, s1.warmup_ratio);
        let m = stage1_step(&mut backbone, &mut opt, &batch, &s1, &space, lr, &mut rng).unwrap();
        totals.push(m.total);
        ars.push(m.l_ar);
    }
    // The span term is weighted by w(K/K_max) with K resampled per step, so
    // single-step totals are noisy; compare windowed means.
    let head = |v: &[f64]| v[..20].iter().sum::<f64>() / 20.0;
    let tail = |v: &[f64]| v[v.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(
        tail(&totals) < 0.75 * head(&totals),
        "total should drop: {} -> {}",
        head(&totals),
        tail(&totals)
    );
    assert!(
        tail(&ars) < 0.5 * head(&ars),
        "next-token loss should halve: {} -> {}",
        head(&ars),
        tail(&ars)
    );
}

#[test]
fn stage2_gradients_pass_grad_check() {
    // KL objective w.r.t. the horizon head parameters, in f64.
    let cfg = small_cfg();
    let (_, khead) = init_params::<f64>(&cfg, 14);
    let mut khead = khead;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for v in khead.w2.data_mut() {
        *v = rng.gen_range(-0.2..0.2);
    }
    let n = 3;
    let d = cfg.d_model;
    let hidden: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut targets = Vec::new();
    for k_star in [2usize, 9, 16] {
        targets.extend(soft_target(k_star, 1.0, cfg.k_max).q);
    }
    let params = khead.param_tensors();
    let hidden_t = crate::numerics::Tensor::from_vec(&[n, d], hidden);
    let report = crate::numerics::grad_check(&params, 1e-5, 60, &mut rng, |tape, vars| {
        let kvars = crate::model::KHeadVars::from_ordered(vars);
        let h = tape.constant(hidden_t.clone());
        let targets_s: Vec<f64> = targets.clone();
        stage2_loss(&khead, tape, &kvars, h, &targets_s, n).unwrap()
    });
    assert!(report.max_rel_err < 1e-4, "stage2 grad check: {}", report.max_rel_err);
}

#[test]
fn run_training_stage2_requires_checkpoint() {
    let vocab = Vocabulary::default();
    let docs = crate::corpus::build_arithmetic_corpus(&vocab, 3, 8, 1);
    let dir = tempfile::tempdir().unwrap();
    let run = TrainRun {
        stage: Stage::Two,
        model: small_cfg(),
        stage1: Stage1Config::default(),
        stage2: Stage2Config::default(),
        seed: 0,
        start_step: 0,
        stop_after: None,
        log_every: 1,
        checkpoint_every: 0,
        docs: &docs,
        vocab: &vocab,
        checkpoint_in: None,
        checkpoint_out: &dir.path().join("out.ckpt"),
        metrics_out: None,
        config_hash: "test".into(),
    };
    assert!(matches!(run_training(&run), Err(TrainError::MissingCheckpoint)));
}
