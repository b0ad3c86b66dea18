//! Deformable 3D image registration with test-time optimization.
//!
//! The crate trains an unsupervised registration network (a small 3D CNN that
//! predicts a displacement vector field, applied through a differentiable
//! trilinear warp) over a cohort of image pairs, then refines that population
//! model per subject ("inter" runs) and per treatment fraction ("intra" runs)
//! by continuing optimization on the single pair at hand.
//!
//! Layout:
//! - [`volume`]: scalar volumes, structure sets, normalization, resampling,
//!   and the raw+JSON file format shared by every stored array.
//! - [`field`]: displacement fields, trilinear warping, composition,
//!   smoothness.
//! - [`ops`]: the differentiable kernels (convolution, activation, warp,
//!   losses) with hand-derived reverse-mode gradients, generic over f32/f64.
//! - [`network`]: architectures, parameter blobs, forward, loss+gradient,
//!   checkpoints.
//! - [`loss`]: similarity metrics and the composite objective.
//! - [`optim`]: Adam, the convergence rule, population training.
//! - [`tto`]: scratch / inter / intra optimization runs and their artifacts.
//! - [`metrics`]: DSC and HD95 scoring.
//! - [`synthetic`]: reproducible phantom cohorts with known ground-truth
//!   deformations.
//! - [`cli`]: command-line entry points and run configuration.
//! - [`benchmark`]: the scripted three-experiment comparison with pass/fail
//!   assertions.

pub mod benchmark;
pub mod cli;
pub mod error;
mod fileio;
pub mod field;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod real;
pub mod report;
pub mod synthetic;
pub mod tto;
pub mod volume;

pub use error::{Error, Result};
