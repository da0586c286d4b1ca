//! Latent-type entity linking.
//!
//! A mention (with its context window) and each candidate knowledge-base
//! entity are embedded (word + character CNN), encoded by a shared BiLSTM,
//! and scored by two signals: a cross-attention relevance `f` and the
//! cosine similarity `g` of their latent type distributions. The fused
//! score `r = w_f * f + w_g * g` is trained with a max-margin ranking loss,
//! jointly with a known-type classification loss that shapes the latent
//! types.

pub mod data;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod matchnet;
pub mod metrics;
pub mod train;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, Tensor, Var};
