//! Core algorithms for token-based multi-agent motion generation.
//!
//! Everything here is pure and allocation-only (`no_std` + `alloc`): geometry,
//! scenario synthesis, the Verlet motion tokenizer, a small reverse-mode
//! autodiff engine, rotary positional embeddings, the scene-conditioned
//! autoregressive policy, pretraining, the reward environment, post-training,
//! test-time search/clustering and the evaluation metrics. File formats, the
//! CLI and wall-clock timing live in the `simagent` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod embedding;
pub mod environment;
pub mod generator;
pub mod geometry;
pub mod math;
pub mod metrics;
pub mod model;
pub mod posttrain;
pub mod pretrain;
pub mod scenario;
pub mod testtime;
pub mod tokenizer;
