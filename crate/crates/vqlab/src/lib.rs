//! Desk-scale vector-quantization laboratory.
//!
//! The lab trains a patch-MLP autoencoder whose bottleneck is one of four
//! vector-quantization regimes sharing a single batched nearest-entry search:
//!
//! * `gd`  — trainable codebook updated by gradient descent,
//! * `fc`  — factorized codes: a low-dimensional trainable codebook behind an
//!   encoder-side projection,
//! * `ema` — codebook maintained by exponential moving averages of assigned
//!   features,
//! * `lc`  — a large frozen codebook (k-means over dataset features) mapped
//!   through a trainable linear projector; only the projector learns.
//!
//! Everything is deterministic under fixed seeds: dataset synthesis, codebook
//! construction, training, and every metric CSV the experiment runners emit.
//!
//! Start with the runnable examples (`cargo run --release --example train_lc`)
//! or the `vqlab` binary, which exposes each study as a subcommand.

pub mod clustering;
pub mod codebook;
pub mod data;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod quantizer;
pub mod tensor;
pub mod trainer;
