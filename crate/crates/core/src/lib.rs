//! Topology-enhanced test-time adaptation for tubular structure
//! segmentation, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`kernels`], [`graph`]: dense `f64` tensors and reverse-mode
//!   differentiation over the layer primitives the network needs.
//! - [`segnet`]: a miniature UNet, its Dice+BCE trainer, and [`checkpoint`] I/O.
//! - [`topomdc`]: directional difference convolutions and patchwise routers.
//! - [`topohg`]: pseudo-break hard-sample generation.
//! - [`adapt`]: the two-stage per-sample adaptation loop.
//! - [`metrics`]: Dice, clDice, Betti numbers, skeletonization, label resizing.
//! - [`synth`]: seeded synthetic tubular images with controllable domain shift.
//! - [`config`], [`formats`]: run configuration and on-disk formats.

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod segnet;
pub mod synth;
pub mod tensor;
pub mod topohg;
pub mod topomdc;

pub use error::{Error, Result};
pub use graph::{grad_check, Graph, Var};
pub use tensor::Tensor;
