//! Weakly aligned two-modality pedestrian detection toolkit.
//!
//! The crate covers the full loop on procedurally generated scenes:
//!
//! - [`geom`]: boxes, IoU, NMS and the cross-modal shift transform.
//! - [`tensornet`]: a small float64 tensor core with RoIAlign and gradient checks.
//! - [`annot`]: paired per-modality annotations and their statistics.
//! - [`arcnn`]: the region feature alignment detector (RFA head, confidence-aware fusion, losses).
//! - [`synthtrain`]: scene generation, mini-batch sampling with RoI jitter, and SGD training.
//! - [`eval`]: miss-rate/FPPI scoring and position-shift sweeps.
//!
//! Data-parallel loops (scene generation, per-frame inference, shift sweeps)
//! run on rayon when the default `parallel` feature is enabled.

pub mod annot;
pub mod arcnn;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geom;
pub mod synthtrain;
pub mod tensornet;

pub use error::{Error, Result};
pub use exec::Execution;
pub use geom::{BBox, ShiftTarget};
pub use tensornet::Tensor;
