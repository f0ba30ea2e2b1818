// Scratch: teacher-forced accuracy at answer positions, train vs eval corpus.
use cdlm_core::corpus::*;
use cdlm_core::diffusion::AttentionMask;
use cdlm_core::model::*;

fn answer_accuracy(backbone: &Backbone<f32>, vocab: &Vocabulary, docs: &[Document], label: &str) {
    let eq = vocab.tokenize("=").unwrap()[0];
    let semi = vocab.tokenize(";").unwrap()[0];
    let v = backbone.cfg.vocab_size;
    let mut first_hit = 0usize;
    let mut first_n = 0usize;
    let mut all_hit = 0usize;
    let mut all_n = 0usize;
    let mut shown = 0;
    for doc in docs.iter().take(40) {
        let out = backbone
            .forward(&doc.tokens[..doc.tokens.len().min(200)], &AttentionMask::causal(doc.tokens.len().min(200)))
            .unwrap();
        let toks = &doc.tokens[..doc.tokens.len().min(200)];
        let mut i = 0;
        while i < toks.len() {
            if toks[i] == eq {
                let mut j = i + 1;
                let mut first_of_answer = true;
                while j < toks.len() && toks[j] != semi {
                    let row = &out.logits.data()[(j - 1) * v..j * v];
                    let pred = row
                        .iter()
                        .enumerate()
                        .skip(4)
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0 as u32;
                    let hit = pred == toks[j];
                    all_n += 1;
                    all_hit += usize::from(hit);
                    if first_of_answer {
                        first_n += 1;
                        first_hit += usize::from(hit);
                        if shown < 8 && !hit {
                            let ctx = vocab.render(&toks[i.saturating_sub(6)..=j.min(toks.len() - 1)]);
                            println!("  miss: ctx {:?} pred {:?} want {:?}", ctx, vocab.render(&[pred]), vocab.render(&[toks[j]]));
                            shown += 1;
                        }
                        first_of_answer = false;
                    }
                    j += 1;
                }
                i = j;
            } else {
                i += 1;
            }
        }
    }
    println!(
        "{label}: first-digit acc {:.3} ({first_hit}/{first_n}), all answer tokens {:.3} ({all_hit}/{all_n})",
        first_hit as f64 / first_n as f64,
        all_hit as f64 / all_n as f64
    );
}

fn main() {
    let vocab = Vocabulary::default();
    let (backbone, _) = load_checkpoint(std::path::Path::new("/tmp/fixture/s2.ckpt")).unwrap();
    let train_docs = build_arithmetic_corpus(&vocab, 11, 150, 1);
    let eval_docs = build_arithmetic_corpus(&vocab, 1234, 80, 1);
    answer_accuracy(&backbone, &vocab, &train_docs, "train-ish corpus (seed 11 arithmetic half)");
    answer_accuracy(&backbone, &vocab, &eval_docs, "eval corpus (seed 1234)");
}
