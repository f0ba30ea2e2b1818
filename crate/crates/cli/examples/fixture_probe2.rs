// Scratch: grid over training budget / corpus balance for the fixture.
use cdlm_core::corpus::*;
use cdlm_core::diffusion::AttentionMask;
use cdlm_core::model::*;
use cdlm_core::train::*;
use std::time::Instant;

fn weighted_mix(vocab: &Vocabulary, seed: u64, n_arith: usize, n_markov: usize) -> Vec<Document> {
    let mut docs = build_arithmetic_corpus(vocab, seed, n_arith, 1);
    docs.extend(build_markov_corpus(vocab, seed + 1, n_markov, 24));
    docs
}

fn first_digit_acc(backbone: &Backbone<f32>, vocab: &Vocabulary, docs: &[Document]) -> f64 {
    let eq = vocab.tokenize("=").unwrap()[0];
    let semi = vocab.tokenize(";").unwrap()[0];
    let v = backbone.cfg.vocab_size;
    let (mut hit, mut n) = (0usize, 0usize);
    for doc in docs.iter().take(60) {
        let len = doc.tokens.len().min(200);
        let out = backbone.forward(&doc.tokens[..len], &AttentionMask::causal(len)).unwrap();
        let toks = &doc.tokens[..len];
        for i in 0..len {
            if toks[i] == eq && i + 1 < len && toks[i + 1] != semi {
                let row = &out.logits.data()[i * v..(i + 1) * v];
                let pred = row.iter().enumerate().skip(4)
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0 as u32;
                n += 1;
                hit += usize::from(pred == toks[i + 1]);
            }
        }
    }
    hit as f64 / n as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1500);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let n_arith: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(150);
    let n_markov: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(150);
    let clamp: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(100.0);

    let vocab = Vocabulary::default();
    let model = ModelConfig {
        n_layers: 3, d_model: 96, n_heads: 4, d_ff: 384,
        vocab_size: vocab.size(), max_seq_len: 256, k_max: 16, khead_hidden: 96,
    };
    let docs = weighted_mix(&vocab, 11, n_arith, n_markov);
    let stage1 = Stage1Config { steps, lr, batch_size: 8, seq_len: 144, weight_clamp: clamp, ..Stage1Config::default() };
    let dir = std::path::PathBuf::from("/tmp/fixture2");
    std::fs::create_dir_all(&dir).unwrap();
    let s1 = dir.join("s1.ckpt");
    let t0 = Instant::now();
    let run1 = TrainRun {
        stage: Stage::One, model: model.clone(), stage1: stage1.clone(),
        stage2: Stage2Config::default(),
        seed: 11, start_step: 0, stop_after: None, log_every: steps / 6, checkpoint_every: 0,
        docs: &docs, vocab: &vocab, checkpoint_in: None, checkpoint_out: &s1, metrics_out: None,
        config_hash: "probe".into(),
    };
    let sum1 = run_training(&run1).unwrap();
    for l in &sum1.logs {
        println!("  step {:4} l_ar {:.3} l_diff {:.3}", l.step, l.l_ar, l.l_diff);
    }
    println!("stage1 {:.0}s (steps={steps} lr={lr} arith={n_arith} markov={n_markov})", t0.elapsed().as_secs_f64());
    // Stage 2 so elastic decoding has a calibrated horizon head.
    let s2 = dir.join("s2.ckpt");
    let stage2 = Stage2Config { steps: 300, lr: 2e-3, batch_size: 8, seq_len: 144, ..Stage2Config::default() };
    let run2 = TrainRun { stage: Stage::Two, stage2: stage2.clone(), checkpoint_in: Some(&s1), checkpoint_out: &s2, ..run1 };
    run_training(&run2).unwrap();
    let (backbone, khead) = load_checkpoint(&s2).unwrap();
    let train_docs = build_arithmetic_corpus(&vocab, 11, 60, 1);
    let eval_docs = build_arithmetic_corpus(&vocab, 1234, 60, 1);
    println!("first-digit acc: train {:.3} eval {:.3}",
        first_digit_acc(&backbone, &vocab, &train_docs),
        first_digit_acc(&backbone, &vocab, &eval_docs));
    use cdlm_cli::experiments::eval_arithmetic;
    use cdlm_core::infer::{AttentionKind, DecodeMode};
    for (name, mode) in [("elastic", DecodeMode::Elastic), ("ar", DecodeMode::ArGreedy)] {
        let stats = eval_arithmetic(&backbone, &khead, &vocab, &eval_docs, mode, 0.9, AttentionKind::Causal, true, 4, 200).unwrap();
        println!("eval {name}: acc {:.3} fpt {:.3} meanK {:.2} meanD {:.2}", stats.accuracy, stats.fpt, stats.mean_k, stats.mean_delta);
    }
}
