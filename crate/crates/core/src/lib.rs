//! Stimulation-efficacy maps for deep brain stimulation targeting.
//!
//! A population atlas baseline and a patch-based 3D residual CNN are trained
//! and compared on synthetic phantom cohorts with known ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod atlasmap;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod patchset;
pub mod phantom;
pub mod report;
pub mod rng;
pub mod slidemap;
pub mod stimkernel;
pub mod tinynn;
pub mod volgrid;

pub use error::{Error, Result};
