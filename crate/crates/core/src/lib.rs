//! Point-supervised segmentation with affinity-driven random-walk refinement.
//!
//! The crate is a self-contained, CPU-only stack:
//!
//! - [`tensor`] / [`tape`] — dense tensors with reverse-mode autodiff
//! - [`affinity`] — pairwise affinity graph, transition matrix, random walk
//! - [`loss`] — the four-term point-supervision loss with blob/watershed
//!   machinery
//! - [`model`] — toy backbone plus activation and affinity branches
//! - [`pseudo`] — pseudo-mask export and the fully-supervised loss pair
//! - [`metrics`] — IoU/mIoU, counting MAE, GAME, baselines
//! - [`data`] — synthetic dataset generation, portable on-disk format,
//!   distance-transform point derivation
//! - [`pipeline`] — config, training loops, evaluation, reports
//!
//! Data-parallel sections go through [`par`]; disabling the `parallel`
//! feature swaps in a sequential fallback with bit-identical outputs.

pub mod error;
pub mod par;
pub mod tensor;
pub mod kernels;
pub mod tape;
pub mod grad_check;
pub mod optim;
pub mod checkpoint;
pub mod affinity;
pub mod blobs;
pub mod watershed;
pub mod loss;
pub mod data;
pub mod model;
pub mod metrics;
pub mod pseudo;
pub mod pipeline;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
