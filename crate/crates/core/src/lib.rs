//! Feature-space style evolution for single-domain generalization.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape and SGD.
//! - [`prompt`]: vocabularies, text encoders and the three-level prompt chain
//!   whose embeddings accumulate word → phrase → sentence.
//! - [`style`]: AdaIN-style normalization, per-channel style parameters, the
//!   text–visual consistency loss and the style-bank trainer.
//! - [`disentangle`]: style/content extractors, their three supervision
//!   losses and the fusion of the two streams.
//! - [`proto`]: soft-assignment prototype clustering that enhances a feature
//!   map with residual encodings against learnable centers.
//! - [`harness`]: synthetic shifted domains, a tiny classifier backbone, the
//!   two-stage training protocol and the ablation runner.
//! - [`io`]: configuration parsing, binary formats and reports.

pub mod disentangle;
mod error;
pub mod harness;
pub mod io;
pub mod layers;
pub mod prompt;
pub mod proto;
pub mod rng;
pub mod style;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Real, Tensor, Var};
