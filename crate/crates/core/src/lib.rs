//! Permutation-order autoregressive pretraining for self-attention acoustic
//! encoders.
//!
//! A transformer encoder is pretrained to regress held-out acoustic frames
//! under randomly sampled factorization orders. The order is realized purely
//! with attention masks over a two-stream (content / query) encoder, so the
//! frames themselves are never reordered. The pretrained content stream is
//! then finetuned as a frame classifier.
//!
//! Modules, bottom-up:
//!
//! * [`tensor`], [`kernels`], [`graph`]: dense tensors and reverse-mode autodiff.
//! * [`features`]: feature files, global CMVN, frame stacking, synthetic corpora.
//! * [`permutation`]: factorization orders, visibility masks, tail targets.
//! * [`model`]: the two-stream encoder and its losses.
//! * [`optim`]: Adam with decoupled weight decay, learning-rate schedules,
//!   gradient accumulation.
//! * [`trainer`]: batching, pretraining and finetuning loops, checkpoints.
//! * [`analysis`]: loss-landscape interpolation and attention dumps.

pub mod analysis;
pub mod checkpoint;
pub mod features;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod permutation;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use graph::{Gradients, Graph, Var};
pub use real::{DType, Real};
pub use tensor::{BoolMatrix, Tensor, TensorError};
