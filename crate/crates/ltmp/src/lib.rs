//! Learned-threshold token merging and pruning (LTMP) for small vision
//! transformers.
//!
//! The crate is organised bottom-up:
//!
//! * [`rng`] — deterministic pseudo-random numbers (splitmix64 seeding,
//!   xoshiro256** stream) so every run of the tooling is reproducible.
//! * [`tensor`] — dense row-major `f64` tensors and the numeric kernels the
//!   model needs (matmul, masked softmax, layer norm, GELU, cross-entropy).
//! * [`tape`] — a reverse-mode autodiff tape over those kernels, including
//!   the straight-through threshold mask used to train reduction thresholds.
//! * [`reduction`] — token scoring, learned-threshold masking, bipartite
//!   merging and pruning; the heart of the method.
//! * [`model`] — a small ViT (patch embedding, pre-norm blocks, class head)
//!   that applies merge/prune between attention and MLP, with bit-identical
//!   masked (training) and gathered (inference) execution paths.
//! * [`flops`] — an analytic FLOPs model for the backbone and the
//!   budget-regularised loss built on it.
//! * [`train`] — backbone pretraining and threshold finetuning loops.
//! * [`data`] — a synthetic labelled image set and its on-disk format.
//! * [`analysis`] — Kendall-tau score correlation and reduction-distribution
//!   reports.
//! * [`viz`] — PPM renderings of which tokens survive each block.
//! * [`config`] / [`cli`] — the `key = value` config format and the
//!   command-line surface.

// Numeric kernels index several parallel buffers with one counter; the
// indexed form reads better there than zipped iterators.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod flops;
pub mod model;
pub mod reduction;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod viz;

/// Doc-test anchors for the guide in `book/`: every fenced Rust block in the
/// chapters compiles and runs under `cargo test --doc`, so the book cannot
/// drift from the API. One module per chapter keeps failures attributable.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/thresholds.md")]
    pub mod thresholds {}
    #[doc = include_str!("../../../book/src/scores.md")]
    pub mod scores {}
    #[doc = include_str!("../../../book/src/reduction.md")]
    pub mod reduction {}
    #[doc = include_str!("../../../book/src/flops.md")]
    pub mod flops {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    pub mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
