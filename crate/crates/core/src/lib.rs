//! Multilingual LSTM language model whose shared latent space is pushed toward
//! language-agnostic representations by a Wasserstein critic, plus the tooling
//! around it: per-language BPE, synthetic languages, batching with truncated
//! BPTT, a joint trainer and a zero-shot transfer harness.
//!
//! All numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient verification). The aliases below pin the common instantiations.

pub mod bpe;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod critic;
pub mod downstream;
pub mod error;
pub mod model;
pub mod numerics;
pub mod synthlang;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Parameter, ParamStore, RngState, Scalar, Tape, Tensor, Var};

/// Single-precision tensor, the training default.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used for gradient verification.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;

pub type Model32 = model::LanguageModel<f32>;
pub type Model64 = model::LanguageModel<f64>;
pub type Critic32 = critic::Critic<f32>;
pub type Critic64 = critic::Critic<f64>;
