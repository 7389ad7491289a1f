//! Online-LoRA: task-free online continual learning with incremental
//! low-rank adapters.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape, and Adam.
//! - [`vit`]: a small vision transformer whose Q and V projections carry
//!   LoRA attachment sites.
//! - [`lora`]: the per-site stack of low-rank factor pairs.
//! - [`plateau`]: the loss-window peak/plateau detector.
//! - [`importance`]: squared-gradient importance and the quadratic penalty.
//! - [`buffer`]: the hard buffer of highest-loss samples.
//! - [`stream`]: synthetic data and the disjoint, Si-blurry and domain streams.
//! - [`metrics`]: final accuracy, anytime accuracy area and forgetting.
//! - [`harness`]: training loops, baselines, evaluation and reporting.

pub mod buffer;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod importance;
pub mod lora;
pub mod metrics;
pub mod plateau;
pub mod rng;
pub mod stream;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
