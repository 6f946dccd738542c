//! Face-recognition vision transformer built from scratch: a small dense
//! tensor library with reverse-mode autodiff, an overlapping-patch tokenizer,
//! a pre-LN transformer encoder, a large-margin cosine classification head,
//! an AdamW training loop, verification metrics, and attention-map analysis.
//!
//! Everything runs on the CPU in plain Rust. The crate doubles as a library
//! and as the `facetf` command-line tool.

pub mod attn;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cosface;
pub mod manifest;
pub mod encoder;
pub mod error;
pub mod ppm;
pub mod eval;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

#[cfg(test)]
pub(crate) mod test_support;
