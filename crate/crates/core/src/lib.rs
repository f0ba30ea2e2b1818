//! Strictly causal discrete-diffusion language modeling at desk scale.
//!
//! The crate trains a small decoder-only transformer in two stages — causal
//! denoising of masked spans, then calibration of a horizon head that predicts
//! how far ahead the model can safely draft — and decodes with an adaptive
//! parallel engine that commits contiguous runs of confident tokens while
//! falling back to token-by-token generation whenever confidence drops.
//!
//! Modules:
//! - [`numerics`]: tensors + reverse-mode autodiff tape, gradient checking
//! - [`corpus`]: synthetic corpora with labeled entropy regimes, tokenizer
//! - [`diffusion`]: forward corruption, attention masks, training examples
//! - [`model`]: transformer backbone, horizon head, checkpoints
//! - [`train`]: the two-stage curriculum and its objectives
//! - [`infer`]: the adaptive-horizon decode engine, baselines, KV cache
//! - [`stats`]: small statistics helpers shared by experiments and tests

pub mod corpus;
pub mod diffusion;
pub mod infer;
pub mod model;
pub mod numerics;
pub mod stats;
pub mod train;

pub use corpus::{Document, Regime, Segment, Vocabulary};
pub use diffusion::{AttentionMask, CorruptionConfig, MaskMode, NoiseSchedule, TrainingExample};
pub use infer::{DecodeConfig, DecodeMode, DecodeOutput, TrajectoryEvent};
pub use model::{Backbone, ForwardOutput, KHead, ModelConfig};
pub use numerics::{grad_check, Scalar, Tape, Tensor, Var};
pub use train::{ProbeResult, SoftTarget, Stage1Config, Stage2Config};
