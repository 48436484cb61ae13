//! Geometric adversarial attacks on landmark-defined face classifiers.
//!
//! The crate bundles everything needed to study landmark-space attacks end to
//! end at desk scale:
//!
//! - [`image`]: image container, normalized coordinates, differentiable
//!   bilinear sampling, PGM/PPM dumps.
//! - [`tps`]: thin-plate-spline fitting, image warping, and the warp's
//!   analytic jacobian with respect to the control points.
//! - [`victim`]: a small self-contained convolutional classifier with
//!   training, input gradients, and checkpoint persistence.
//! - [`attack`]: the landmark-space attacks (per-landmark sign ascent and its
//!   group-constrained variant) plus an intensity-space sign baseline.
//! - [`facegen`]: synthetic schematic-face dataset with ground-truth
//!   landmarks and semantic groups.
//! - [`defense`]: adversarial-training defenses and robustness evaluation.
//! - [`harness`]: experiment orchestration, metrics, CSV output, and the
//!   geometric-variable sweep.
//! - [`gradcheck`]: the independent finite-difference verification path.

pub mod attack;
pub mod defense;
pub mod error;
pub mod facegen;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod linalg;
pub mod tps;
pub mod victim;

pub use error::{Error, Result};
