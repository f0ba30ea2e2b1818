//! Decoder-only transformer backbone with a mask-token embedding, plus the
//! horizon head that maps a hidden state to a distribution over lookahead
//! sizes `1..=K_max`.
//!
//! Prediction convention: the hidden state at position `i` predicts the token
//! at position `i+1`, for the next-token loss and the denoising loss alike. A
//! masked position `j` is therefore predicted from row `j-1`, which sees
//! earlier window positions as inputs.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::corpus::TokenId;
use crate::diffusion::AttentionMask;
use crate::numerics::{scalar, NumericsError, Scalar, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("attention mask length {mask_len} does not match sequence length {len}")]
    MaskLengthMismatch { mask_len: usize, len: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub k_max: usize,
    pub khead_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: crate::corpus::Vocabulary::default().size(),
            max_seq_len: 256,
            k_max: 16,
            khead_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) {
        assert!(self.d_model % self.n_heads == 0, "d_model must divide by n_heads");
        assert!(self.k_max >= 1, "k_max must be at least 1");
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total parameter count (backbone + horizon head), closed form.
    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d                    // ln1
            + 4 * (d * d + d)                    // q, k, v, o projections
            + 2 * d                              // ln2
            + d * self.d_ff + self.d_ff          // mlp up
            + self.d_ff * d + d; // mlp down
        self.vocab_size * d
            + self.max_seq_len * d
            + self.n_layers * per_layer
            + 2 * d                              // final ln
            + d * self.vocab_size + self.vocab_size // output projection
            + d * self.khead_hidden + self.khead_hidden
            + self.khead_hidden * self.k_max + self.k_max
    }
}

// ── Parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNormParams<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct LayerParams<S: Scalar> {
    pub ln1: LayerNormParams<S>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln2: LayerNormParams<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct Backbone<S: Scalar> {
    pub cfg: ModelConfig,
    pub tok_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub ln_f: LayerNormParams<S>,
    pub out_w: Tensor<S>,
    pub out_b: Tensor<S>,
}

/// Two affine layers with a GELU in between; final layer zero-initialized so
/// an untrained head predicts the uniform horizon distribution.
#[derive(Debug, Clone)]
pub struct KHead<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

/// Full-sequence forward output: `logits[i]` scores the token at position
/// `i+1`; `hidden` holds the final-layer states.
#[derive(Debug, Clone)]
pub struct ForwardOutput<S: Scalar> {
    pub logits: Tensor<S>,
    pub hidden: Tensor<S>,
}

/// Categorical distribution over horizons `1..=K_max` (slot 0 is `k = 1`).
#[derive(Debug, Clone)]
pub struct HorizonDistribution {
    pub probs: Vec<f64>,
}

impl HorizonDistribution {
    /// Most probable horizon, ties broken toward the smaller `k`.
    pub fn argmax_k(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best + 1
    }

    pub fn entropy_nats(&self) -> f64 {
        self.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

// ── Initialization ───────────────────────────────────────────────────

const INIT_STD: f64 = 0.02;

fn randn<S: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scalar(dist.sample(rng))).collect())
}

fn ones<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::from_vec(&[n], vec![S::one(); n])
}

/// Deterministic scaled-normal initialization. The output projection and the
/// horizon head's final layer start at zero, so a fresh model emits uniform
/// distributions from both heads.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> (Backbone<S>, KHead<S>) {
    cfg.validate();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            ln1: LayerNormParams { gamma: ones(d), beta: Tensor::zeros(&[d]) },
            wq: randn(&[d, d], INIT_STD, &mut rng),
            bq: Tensor::zeros(&[d]),
            wk: randn(&[d, d], INIT_STD, &mut rng),
            bk: Tensor::zeros(&[d]),
            wv: randn(&[d, d], INIT_STD, &mut rng),
            bv: Tensor::zeros(&[d]),
            wo: randn(&[d, d], INIT_STD, &mut rng),
            bo: Tensor::zeros(&[d]),
            ln2: LayerNormParams { gamma: ones(d), beta: Tensor::zeros(&[d]) },
            w1: randn(&[d, cfg.d_ff], INIT_STD, &mut rng),
            b1: Tensor::zeros(&[cfg.d_ff]),
            w2: randn(&[cfg.d_ff, d], INIT_STD, &mut rng),
            b2: Tensor::zeros(&[d]),
        })
        .collect();
    let backbone = Backbone {
        tok_emb: randn(&[cfg.vocab_size, d], INIT_STD, &mut rng),
        pos_emb: randn(&[cfg.max_seq_len, d], INIT_STD, &mut rng),
        layers,
        ln_f: LayerNormParams { gamma: ones(d), beta: Tensor::zeros(&[d]) },
        out_w: Tensor::zeros(&[d, cfg.vocab_size]),
        out_b: Tensor::zeros(&[cfg.vocab_size]),
        cfg: cfg.clone(),
    };
    let khead = KHead {
        w1: randn(&[d, cfg.khead_hidden], INIT_STD, &mut rng),
        b1: Tensor::zeros(&[cfg.khead_hidden]),
        w2: Tensor::zeros(&[cfg.khead_hidden, cfg.k_max]),
        b2: Tensor::zeros(&[cfg.k_max]),
    };
    (backbone, khead)
}

// ── Parameter traversal ──────────────────────────────────────────────

impl<S: Scalar> Backbone<S> {
    /// Visit every parameter in the canonical order used by checkpoints,
    /// optimizers, and tape registration.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f("tok_emb".into(), &self.tok_emb);
        f("pos_emb".into(), &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layers.{i}.ln1.gamma"), &l.ln1.gamma);
            f(format!("layers.{i}.ln1.beta"), &l.ln1.beta);
            f(format!("layers.{i}.attn.wq"), &l.wq);
            f(format!("layers.{i}.attn.bq"), &l.bq);
            f(format!("layers.{i}.attn.wk"), &l.wk);
            f(format!("layers.{i}.attn.bk"), &l.bk);
            f(format!("layers.{i}.attn.wv"), &l.wv);
            f(format!("layers.{i}.attn.bv"), &l.bv);
            f(format!("layers.{i}.attn.wo"), &l.wo);
            f(format!("layers.{i}.attn.bo"), &l.bo);
            f(format!("layers.{i}.ln2.gamma"), &l.ln2.gamma);
            f(format!("layers.{i}.ln2.beta"), &l.ln2.beta);
            f(format!("layers.{i}.mlp.w1"), &l.w1);
            f(format!("layers.{i}.mlp.b1"), &l.b1);
            f(format!("layers.{i}.mlp.w2"), &l.w2);
            f(format!("layers.{i}.mlp.b2"), &l.b2);
        }
        f("ln_f.gamma".into(), &self.ln_f.gamma);
        f("ln_f.beta".into(), &self.ln_f.beta);
        f("out.w".into(), &self.out_w);
        f("out.b".into(), &self.out_b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f("tok_emb".into(), &mut self.tok_emb);
        f("pos_emb".into(), &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("layers.{i}.ln1.gamma"), &mut l.ln1.gamma);
            f(format!("layers.{i}.ln1.beta"), &mut l.ln1.beta);
            f(format!("layers.{i}.attn.wq"), &mut l.wq);
            f(format!("layers.{i}.attn.bq"), &mut l.bq);
            f(format!("layers.{i}.attn.wk"), &mut l.wk);
            f(format!("layers.{i}.attn.bk"), &mut l.bk);
            f(format!("layers.{i}.attn.wv"), &mut l.wv);
            f(format!("layers.{i}.attn.bv"), &mut l.bv);
            f(format!("layers.{i}.attn.wo"), &mut l.wo);
            f(format!("layers.{i}.attn.bo"), &mut l.bo);
            f(format!("layers.{i}.ln2.gamma"), &mut l.ln2.gamma);
            f(format!("layers.{i}.ln2.beta"), &mut l.ln2.beta);
            f(format!("layers.{i}.mlp.w1"), &mut l.w1);
            f(format!("layers.{i}.mlp.b1"), &mut l.b1);
            f(format!("layers.{i}.mlp.w2"), &mut l.w2);
            f(format!("layers.{i}.mlp.b2"), &mut l.b2);
        }
        f("ln_f.gamma".into(), &mut self.ln_f.gamma);
        f("ln_f.beta".into(), &mut self.ln_f.beta);
        f("out.w".into(), &mut self.out_w);
        f("out.b".into(), &mut self.out_b);
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// Clones of every parameter in canonical order (gradient-check probes).
    pub fn param_tensors(&self) -> Vec<Tensor<S>> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, t| out.push(t.clone()));
        out
    }

    pub fn cast<T: Scalar>(&self) -> Backbone<T> {
        Backbone {
            cfg: self.cfg.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1: LayerNormParams { gamma: l.ln1.gamma.cast(), beta: l.ln1.beta.cast() },
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    ln2: LayerNormParams { gamma: l.ln2.gamma.cast(), beta: l.ln2.beta.cast() },
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            ln_f: LayerNormParams { gamma: self.ln_f.gamma.cast(), beta: self.ln_f.beta.cast() },
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
        }
    }
}

impl<S: Scalar> KHead<S> {
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f("khead.w1".into(), &self.w1);
        f("khead.b1".into(), &self.b1);
        f("khead.w2".into(), &self.w2);
        f("khead.b2".into(), &self.b2);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f("khead.w1".into(), &mut self.w1);
        f("khead.b1".into(), &mut self.b1);
        f("khead.w2".into(), &mut self.w2);
        f("khead.b2".into(), &mut self.b2);
    }

    pub fn cast<T: Scalar>(&self) -> KHead<T> {
        KHead {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }

    pub fn param_tensors(&self) -> Vec<Tensor<S>> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, t| out.push(t.clone()));
        out
    }
}

// ── Tape forward ─────────────────────────────────────────────────────

pub struct LayerVars {
    pub ln1: (Var, Var),
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2: (Var, Var),
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct BackboneVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub ln_f: (Var, Var),
    pub out_w: Var,
    pub out_b: Var,
}

impl BackboneVars {
    pub const fn var_count(n_layers: usize) -> usize {
        2 + 16 * n_layers + 4
    }

    /// Rebuild the structured view from vars laid out in canonical visit
    /// order (the layout produced by registering `param_tensors`).
    pub fn from_ordered(n_layers: usize, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), Self::var_count(n_layers));
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("var count checked");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..n_layers)
            .map(|_| LayerVars {
                ln1: (next(), next()),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2: (next(), next()),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        BackboneVars { tok_emb, pos_emb, layers, ln_f: (next(), next()), out_w: next(), out_b: next() }
    }
}

impl<S: Scalar> Backbone<S> {
    /// Put every parameter on the tape. `trainable = false` registers them
    /// as constants (used when only another component takes gradients).
    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> BackboneVars {
        BackboneVars {
            tok_emb: tape.leaf(&self.tok_emb, trainable),
            pos_emb: tape.leaf(&self.pos_emb, trainable),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    ln1: (tape.leaf(&l.ln1.gamma, trainable), tape.leaf(&l.ln1.beta, trainable)),
                    wq: tape.leaf(&l.wq, trainable),
                    bq: tape.leaf(&l.bq, trainable),
                    wk: tape.leaf(&l.wk, trainable),
                    bk: tape.leaf(&l.bk, trainable),
                    wv: tape.leaf(&l.wv, trainable),
                    bv: tape.leaf(&l.bv, trainable),
                    wo: tape.leaf(&l.wo, trainable),
                    bo: tape.leaf(&l.bo, trainable),
                    ln2: (tape.leaf(&l.ln2.gamma, trainable), tape.leaf(&l.ln2.beta, trainable)),
                    w1: tape.leaf(&l.w1, trainable),
                    b1: tape.leaf(&l.b1, trainable),
                    w2: tape.leaf(&l.w2, trainable),
                    b2: tape.leaf(&l.b2, trainable),
                })
                .collect(),
            ln_f: (tape.leaf(&self.ln_f.gamma, trainable), tape.leaf(&self.ln_f.beta, trainable)),
            out_w: tape.leaf(&self.out_w, trainable),
            out_b: tape.leaf(&self.out_b, trainable),
        }
    }

    /// Gradients for every registered parameter, in canonical visit order.
    pub fn collect_grads(tape: &Tape<S>, vars: &BackboneVars) -> Vec<Vec<S>> {
        let mut order: Vec<Var> = vec![vars.tok_emb, vars.pos_emb];
        for l in &vars.layers {
            order.extend([
                l.ln1.0, l.ln1.1, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2.0,
                l.ln2.1, l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        order.extend([vars.ln_f.0, vars.ln_f.1, vars.out_w, vars.out_b]);
        order
            .into_iter()
            .map(|v| tape.grad(v).expect("gradient present after backward").to_vec())
            .collect()
    }

    fn validate_tokens(&self, tokens: &[TokenId], mask: &AttentionMask) -> Result<()> {
        if tokens.len() > self.cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.cfg.max_seq_len,
            });
        }
        if mask.len() != tokens.len() {
            return Err(ModelError::MaskLengthMismatch { mask_len: mask.len(), len: tokens.len() });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id: bad, vocab: self.cfg.vocab_size });
        }
        Ok(())
    }

    /// Forward pass recorded on a tape. Returns `(logits, hidden)` vars.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &BackboneVars,
        tokens: &[TokenId],
        mask: &AttentionMask,
    ) -> Result<(Var, Var)> {
        self.validate_tokens(tokens, mask)?;
        let len = tokens.len();
        let n_heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let vis = Arc::new(mask.visibility());
        let inv_sqrt_dh = scalar::<S>(1.0 / (dh as f64).sqrt());

        let tok = tape.gather_rows(vars.tok_emb, tokens)?;
        let pos_ids: Vec<u32> = (0..len as u32).collect();
        let pos = tape.gather_rows(vars.pos_emb, &pos_ids)?;
        let mut x = tape.add(tok, pos)?;

        for l in &vars.layers {
            let h = tape.layer_norm(x, l.ln1.0, l.ln1.1)?;
            let q = {
                let mm = tape.matmul(h, l.wq)?;
                tape.add_row_broadcast(mm, l.bq)?
            };
            let k = {
                let mm = tape.matmul(h, l.wk)?;
                tape.add_row_broadcast(mm, l.bk)?
            };
            let v = {
                let mm = tape.matmul(h, l.wv)?;
                tape.add_row_broadcast(mm, l.bv)?
            };
            let mut head_outs = Vec::with_capacity(n_heads);
            for hd in 0..n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scaled = tape.scale(scores, inv_sqrt_dh)?;
                let probs = tape.masked_softmax(scaled, vis.clone())?;
                head_outs.push(tape.matmul(probs, vh)?);
            }
            let att = tape.concat_cols(&head_outs)?;
            let proj = {
                let mm = tape.matmul(att, l.wo)?;
                tape.add_row_broadcast(mm, l.bo)?
            };
            x = tape.add(x, proj)?;

            let h2 = tape.layer_norm(x, l.ln2.0, l.ln2.1)?;
            let up = {
                let mm = tape.matmul(h2, l.w1)?;
                tape.add_row_broadcast(mm, l.b1)?
            };
            let act = tape.gelu(up)?;
            let down = {
                let mm = tape.matmul(act, l.w2)?;
                tape.add_row_broadcast(mm, l.b2)?
            };
            x = tape.add(x, down)?;
        }

        let hidden = tape.layer_norm(x, vars.ln_f.0, vars.ln_f.1)?;
        let logits = {
            let mm = tape.matmul(hidden, vars.out_w)?;
            tape.add_row_broadcast(mm, vars.out_b)?
        };
        Ok((logits, hidden))
    }

    /// Convenience full-sequence forward without gradient tracking.
    pub fn forward(&self, tokens: &[TokenId], mask: &AttentionMask) -> Result<ForwardOutput<S>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let (logits, hidden) = self.forward_on_tape(&mut tape, &vars, tokens, mask)?;
        Ok(ForwardOutput {
            logits: tape.value(logits).clone(),
            hidden: tape.value(hidden).clone(),
        })
    }
}

// ── Horizon head forward ─────────────────────────────────────────────

pub struct KHeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl KHeadVars {
    pub fn from_ordered(vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 4);
        KHeadVars { w1: vars[0], b1: vars[1], w2: vars[2], b2: vars[3] }
    }
}

impl<S: Scalar> KHead<S> {
    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> KHeadVars {
        KHeadVars {
            w1: tape.leaf(&self.w1, trainable),
            b1: tape.leaf(&self.b1, trainable),
            w2: tape.leaf(&self.w2, trainable),
            b2: tape.leaf(&self.b2, trainable),
        }
    }

    /// Horizon logits for a batch of hidden-state rows already on the tape.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape<S>,
        vars: &KHeadVars,
        hidden_rows: Var,
    ) -> crate::numerics::Result<Var> {
        let up = {
            let mm = tape.matmul(hidden_rows, vars.w1)?;
            tape.add_row_broadcast(mm, vars.b1)?
        };
        let act = tape.gelu(up)?;
        let mm = tape.matmul(act, vars.w2)?;
        tape.add_row_broadcast(mm, vars.b2)
    }

    pub fn collect_grads(tape: &Tape<S>, vars: &KHeadVars) -> Vec<Vec<S>> {
        [vars.w1, vars.b1, vars.w2, vars.b2]
            .into_iter()
            .map(|v| tape.grad(v).expect("gradient present after backward").to_vec())
            .collect()
    }
}

/// Distribution over horizons `1..=K_max` from one hidden state.
pub fn khead_forward<S: Scalar>(khead: &KHead<S>, h: &[S]) -> HorizonDistribution {
    let (d, hid) = khead.w1.rows_cols();
    debug_assert_eq!(h.len(), d);
    let k_max = khead.w2.rows_cols().1;
    let mut z1 = vec![S::zero(); hid];
    crate::numerics::kernels::gemm_nn(1, d, hid, h, khead.w1.data(), &mut z1);
    for (z, &b) in z1.iter_mut().zip(khead.b1.data()) {
        *z = crate::numerics::kernels::gelu(*z + b);
    }
    let mut z2 = vec![S::zero(); k_max];
    crate::numerics::kernels::gemm_nn(1, hid, k_max, &z1, khead.w2.data(), &mut z2);
    for (z, &b) in z2.iter_mut().zip(khead.b2.data()) {
        *z = *z + b;
    }
    crate::numerics::kernels::softmax_row(&mut z2);
    HorizonDistribution { probs: z2.iter().map(|&p| p.to_f64().unwrap_or(0.0)).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::MaskMode;
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

    #[test]
    fn init_is_deterministic() {
        let cfg = small_cfg();
        let (a, ka) = init_params::<f32>(&cfg, 7);
        let (b, kb) = init_params::<f32>(&cfg, 7);
        let mut equal = true;
        a.visit_params(&mut |name, t| {
            let mut other = None;
            b.visit_params(&mut |n2, t2| {
                if n2 == name {
                    other = Some(t2.clone());
                }
            });
            equal &= other.unwrap().data() == t.data();
        });
        assert!(equal);
        assert_eq!(ka.w1.data(), kb.w1.data());
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = small_cfg();
        let (backbone, khead) = init_params::<f32>(&cfg, 0);
        let mut total = backbone.n_params();
        khead.visit_params(&mut |_, t| total += t.numel());
        assert_eq!(total, cfg.n_params());

        let default_cfg = ModelConfig::default();
        let (bb, kh) = init_params::<f32>(&default_cfg, 1);
        let mut n = bb.n_params();
        kh.visit_params(&mut |_, t| n += t.numel());
        assert_eq!(n, default_cfg.n_params());
    }

    #[test]
    fn fresh_model_logits_are_zero_and_ce_uniform() {
        let cfg = small_cfg();
        let (backbone, _) = init_params::<f64>(&cfg, 3);
        let tokens: Vec<u32> = vec![4, 5, 6, 7];
        let out = backbone.forward(&tokens, &AttentionMask::causal(4)).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        // Uniform softmax over V: CE = ln V.
        let mut row = out.logits.data()[..cfg.vocab_size].to_vec();
        crate::numerics::kernels::softmax_row(&mut row);
        let ce = -row[10].ln();
        assert!((ce - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn causal_forward_ignores_future_mutations() {
        let cfg = small_cfg();
        let (mut backbone, _) = init_params::<f32>(&cfg, 11);
        // Non-zero output head so logits actually depend on the input.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for v in backbone.out_w.data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let mask = AttentionMask::causal(8);
        let tokens: Vec<u32> = (0..8).map(|_| rng.gen_range(4..45)).collect();
        let base = backbone.forward(&tokens, &mask).unwrap();
        for j in 3..8 {
            let mut mutated = tokens.clone();
            mutated[j] = if mutated[j] == 4 { 5 } else { 4 };
            let out = backbone.forward(&mutated, &mask).unwrap();
            let (_, v) = base.logits.rows_cols();
            for i in 0..j {
                assert_eq!(
                    &base.logits.data()[i * v..(i + 1) * v],
                    &out.logits.data()[i * v..(i + 1) * v],
                    "prefix logits changed at row {i} after mutating {j}"
                );
            }
        }
    }

    #[test]
    fn bidirectional_window_sees_forward_positions() {
        let cfg = small_cfg();
        let (mut backbone, _) = init_params::<f32>(&cfg, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in backbone.out_w.data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let mask = AttentionMask::new(8, MaskMode::BidirectionalWindow { start: 2, end: 6 }).unwrap();
        let tokens: Vec<u32> = (0..8).map(|_| rng.gen_range(4..45)).collect();
        let base = backbone.forward(&tokens, &mask).unwrap();
        let mut mutated = tokens.clone();
        mutated[5] = if mutated[5] == 4 { 5 } else { 4 };
        let out = backbone.forward(&mutated, &mask).unwrap();
        let (_, v) = base.logits.rows_cols();
        // Query position 2 sits inside the window and now sees position 5.
        assert_ne!(
            &base.logits.data()[2 * v..3 * v],
            &out.logits.data()[2 * v..3 * v],
            "window query must depend on forward positions inside the window"
        );
        // Query position 0 is before the window: still causal.
        assert_eq!(&base.logits.data()[..v], &out.logits.data()[..v]);
    }

    #[test]
    fn khead_zero_init_is_uniform_and_shift_invariant() {
        let cfg = small_cfg();
        let (_, khead) = init_params::<f64>(&cfg, 17);
        let h = vec![0.3; cfg.d_model];
        let dist = khead_forward(&khead, &h);
        assert_eq!(dist.probs.len(), cfg.k_max);
        let total: f64 = dist.probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        for &p in &dist.probs {
            assert!((p - 1.0 / cfg.k_max as f64).abs() < 1e-9);
        }
        assert_eq!(dist.argmax_k(), 1, "uniform ties break toward k = 1");

        // Adding a constant to the output logits keeps the argmax.
        let mut shifted = khead.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in shifted.w2.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let base = khead_forward(&shifted, &h).argmax_k();
        for v in shifted.b2.data_mut() {
            *v += 3.7;
        }
        assert_eq!(khead_forward(&shifted, &h).argmax_k(), base);
    }

    #[test]
    fn token_out_of_range_is_an_error() {
        let cfg = small_cfg();
        let (backbone, _) = init_params::<f32>(&cfg, 1);
        let err = backbone.forward(&[4, 5, 200], &AttentionMask::causal(3));
        assert!(matches!(err, Err(ModelError::TokenOutOfRange { id: 200, .. })));
    }
}
