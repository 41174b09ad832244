//! Four-phase self-synthesis training for a small vision-language model.
//!
//! A byte-level BPE tokenizer and a reduced LLaMA-style decoder are trained
//! from scratch on text, coupled to a frozen patch-transformer vision encoder
//! through a learnable two-layer projection, used to caption unlabeled images,
//! and then trained further on the mixture of real and self-generated text.
//! Zero-shot evaluators score the resulting checkpoints.
//!
//! Everything runs on the CPU through the small reverse-mode autodiff engine in
//! [`tensor`].

pub mod data;
pub mod digest;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod synthesis;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
