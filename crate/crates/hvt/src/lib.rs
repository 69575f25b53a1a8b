//! Hierarchical pooled vision transformer laboratory.
//!
//! A self-contained f64 implementation of a ViT-style encoder whose token
//! sequence is progressively shortened by 1D pooling between stages, with:
//!
//! - [`tensor`]: dense tensors, a reverse-mode autodiff tape, and
//!   finite-difference gradient verification;
//! - [`model`]: the encoder (patch embedding, transformer blocks, staged
//!   pooling with re-learned positional embeddings, class-token and
//!   pooled-token heads) plus token-map export;
//! - [`cost`]: closed-form FLOPs/parameter accounting and a brute-force
//!   scaling explorer over depth/width/resolution/patch size;
//! - [`train`]: synthetic dataset generation, AdamW, train/eval loops,
//!   and binary checkpoint persistence;
//! - [`cli`]: the `hvt` command-line front end.

pub mod cli;
pub mod cost;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
