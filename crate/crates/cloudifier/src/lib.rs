//! Dense semantic segmentation of artificial (software-rendered) UI scenes.
//!
//! The crate bundles the full stack: a rank-4 tensor core with reverse-mode
//! gradients, the inception-residual / depthwise-separable-residual network
//! builders with upsample-and-merge readout, a synthetic themed-widget scene
//! generator with automatic dense labels, a paired image/label augmentation
//! pipeline, and the training/evaluation machinery (Adam, plateau decay,
//! 93/4/3 splits, per-kind accuracy and recall reports).
//!
//! Start from the runnable examples (`cargo run --example ...`) or the thin
//! `cloudifier` binary with its `gen-data`, `train`, `eval` and `infer`
//! subcommands.

pub mod augment;
pub mod commands;
pub mod error;
pub mod graph;
pub mod io;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
