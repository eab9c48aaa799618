//! Desk-scale vision-language hazard localization.
//!
//! A toy vision-language model whose last-layer vision attention is read out
//! as a hazard point, trained with a coordinate + caption multi-task loss
//! under AdamW with warmup/cosine scheduling, and scored with BLEU-4,
//! ROUGE-1/2/L and pixel MSE.
//!
//! Layout:
//! - [`tensor`]: tensors and tape-based reverse-mode autodiff
//! - [`model`]: patch encoder, text encoder, latent projectors, LoRA, caption decoder
//! - [`localization`]: attention map → hazard point
//! - [`objective`]: coordinate and text losses
//! - [`optim`]: AdamW, learning-rate schedule, clipping, convergence probe
//! - [`training`]: the fine-tuning loop, evaluation and checkpoints
//! - [`data`]: annotation schema, JSONL loading, vocabulary, synthetic scenes
//! - [`metrics`]: BLEU-4, ROUGE-N, ROUGE-L, pixel MSE

// `!(x > 0.0)` guards are written that way on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod exec;
pub mod localization;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod tensor;
pub mod training;

pub use exec::Exec;
pub use tensor::{Tape, Tensor, TensorError, Var};
