//! Reasoning-guided embedding lab.
//!
//! A decoder-only transformer that writes a rationale before emitting the
//! `<emb>` token whose final hidden state is the embedding, trained with a
//! joint next-token + InfoNCE objective on a synthetic composed-retrieval
//! task, plus the retrieval harness and diagnostics around it.

pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
