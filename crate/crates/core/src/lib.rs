//! Masked diffusion language modeling at desk scale.
//!
//! Noise schedules, frequency-informed masking, the weighted NELBO
//! objective, a time-conditioned encoder with hand-written gradients, a BPE
//! tokenizer, a deterministic trainer and pseudo-log-likelihood evaluation.

pub mod cli;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod objective;
pub mod schedules;
pub mod tokenizer;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};

/// Index into the tokenizer vocabulary.
pub type TokenId = u32;
