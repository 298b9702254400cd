//! Multi-atlas segmentation of 3D volumes.
//!
//! The pipeline normalizes each scan to a tissue probability map
//! ([`clic`]), registers the atlas set to the target by minimizing the
//! group intensity variance ([`registration`]), selects and fuses the
//! propagated atlas labels ([`fusion`]) and refines the fused mask with a
//! region-based level set ([`levelset`]). [`metrics`] and [`phantom`]
//! provide evaluation and synthetic test data; [`pipeline`] wires the
//! stages together for the command-line tool.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clic;
pub mod distance;
pub mod error;
pub mod fusion;
pub mod levelset;
pub mod metrics;
pub mod mhd;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Grid, LabelVolume, Vec3, Volume};
