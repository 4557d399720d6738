//! Training engine and cost planner for tiny monocular-depth U-Nets.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: CHW tensors, emulated bf16 rounding, resampling.
//! * [`layers`]: forward/backward kernels and a finite-difference checker.
//! * [`model`]: encoder + three decoder U-Net assembly, sparse backward.
//! * [`cost`]: analytic memory and MAC planner.
//! * [`labels`]: depth/disparity conversion and pseudo-label simulation.
//! * [`training`]: berHu loss, Adam, augmentation, training loop.
//! * [`metrics`]: depth metrics, evaluation and the domain-shift detector.
//! * [`dataset`]: synthetic scene generator and the `UMDE` file format.

pub mod cost;
pub mod dataset;
pub mod error;
pub mod labels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ArchConfig, Block, Model, SparseUpdateConfig};
pub use tensor::{DType, Mask, Tensor};
