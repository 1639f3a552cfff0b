//! RetSeg: a U-shaped binary segmentation network whose bottleneck replaces
//! self-attention with bidirectional two-dimensional multi-head retention.
//!
//! The crate is organized around six pieces:
//!
//! - [`tensor`]: dense f64 tensors, a reverse-mode differentiation tape and a
//!   finite-difference gradient checker.
//! - [`retention`]: patch tokenization, the 2-D decay mask, per-pair phase
//!   rotation, parallel retention, and a recurrent brute-force oracle used to
//!   cross-check the parallel path.
//! - [`model`]: the encoder (processing blocks / encoder bottleneck
//!   elements), the retention bottleneck, the decoder with skip connections,
//!   parameter initialization and checkpoint serialization.
//! - [`losses`] and [`metrics`]: the composite training loss (weighted BCE +
//!   focal + L1, optional Dice) and segmentation metrics.
//! - [`data`]: image/mask loading, dataset splitting, batching, and a
//!   synthetic blob generator for desk-scale training.
//! - [`harness`] and [`verify`]: training/evaluation/inference entry points
//!   and the self-check suite behind the `verify` subcommand.

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod retention;
pub(crate) mod seeds;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
