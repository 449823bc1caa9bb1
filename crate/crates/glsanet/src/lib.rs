//! Saliency-guided grid attention image classification, from scratch.
//!
//! The crate provides:
//!
//! * [`tensor`] — a dense `f32` tensor engine with eager reverse-mode
//!   autodiff, deterministic Kaiming initialization, SGD with momentum, and a
//!   multiply–accumulate counter (a 64-bit shadow path backs the
//!   finite-difference oracles).
//! * [`saliency`] — per-pixel importance maps obtained by backpropagating a
//!   class score to the input image, plus PGM export.
//! * [`grid`] — N×N image partitions, per-grid objectiveness scores, binary
//!   training targets, and salient-patch sampling.
//! * [`glsa`] — the grid-wise local self-attention module: shared
//!   depthwise/pointwise convolution embeddings per grid entity,
//!   proximity-grouped multi-head self-attention, a sigmoid objectiveness
//!   head, and its BCE training loop.
//! * [`classifier`] — dual-branch classification (global backbone + local
//!   backbone over sampled patches), training, evaluation, baseline variants,
//!   and closed-form MUL-ADD accounting.
//! * [`io`], [`config`], [`synth`], [`cli`] — PPM/PGM codecs, binary
//!   checkpoints, flat-text configs, synthetic dataset generation, and the
//!   command-line front end.

pub mod classifier;
pub mod cli;
pub mod config;
pub mod error;
pub mod glsa;
pub mod grid;
pub mod io;
pub mod rng;
pub mod saliency;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{MulAddCounter, ParamSet, Scalar, SgdMomentum, Tape, Tensor, TensorId};
