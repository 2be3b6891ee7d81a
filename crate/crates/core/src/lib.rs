//! Text encoding with per-token semantic attention reweighting for
//! CLIP-style vision-language models.
//!
//! The crate covers tokenization, the reweighted text encoder and its
//! weight-only reverse pass, few-shot training of token log-weights,
//! checkpoint I/O, an image-embedding store and the retrieval metrics used
//! to evaluate weight changes.

pub mod bench;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model_io;
pub mod store;
pub mod sweep;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
