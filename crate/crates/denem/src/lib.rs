//! Benchmark library for diversified deep-ensemble training and episodic
//! test-time adaptation on grouped (biopsy-core) patch classification under
//! multi-center distribution shift.
//!
//! The crate is organized around six subsystems:
//!
//! - [`objectives`]: pure differentiable losses (cross-entropy, pairwise
//!   mutual information, marginal entropy, augmentation-marginal entropy)
//!   and their analytic gradients;
//! - [`nn`]: a small CPU network stack (conv/norm/pool/linear with explicit
//!   backward passes) hosting the ResNet10-style encoder;
//! - [`ensemble`]: M-member deep ensembles with seed-determined init, a
//!   batch/group norm policy, snapshot/restore, and checkpoint I/O;
//! - [`adaptation`]: episodic per-core test-time adaptation engines
//!   (diversified marginal-entropy, entropy-only, augmentation-marginal);
//! - [`data`]: a synthetic multi-center shifted-data generator, patch
//!   extraction geometry, leave-one-center-out splitting, dataset I/O;
//! - [`evaluation`]: core-level metrics (AUROC, balanced accuracy, expected
//!   calibration error), involvement filtering, heatmap export;
//! - [`harness`]: experiment configs, the training/evaluation pipeline, the
//!   ablation grid, and report serialization behind the `denem` CLI.

pub mod adaptation;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod imgops;
pub mod nn;
pub mod objectives;
pub mod util;

pub use error::{Error, Result};
