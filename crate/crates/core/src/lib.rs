//! Few-shot text classification with a meta-learned prompt pool over a
//! frozen toy masked-LM encoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff on a single-use tape
//! - [`episodes`]: synthetic corpora and N-way k-shot episode sampling
//! - [`encoder`]: a small transformer MLM, pretrained then frozen
//! - [`pool`]: the key/value prompt pool and its attention read-out
//! - [`verbalizer`]: hand-set, embedding-prototype and learned label heads
//! - [`meta`]: episodic inner/outer training loops
//! - [`checkpoint`]: versioned binary containers for params

pub mod checkpoint;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod meta;
pub mod pool;
pub mod tensor;
pub mod verbalizer;

pub use error::{Error, Result};
