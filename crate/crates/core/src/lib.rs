//! Geometry, imaging and optimization toolkit for jointly estimating depth,
//! camera motion, optical flow and moving-object masks from frame pairs.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod geometry;
pub mod hmp;
pub mod imaging;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub mod synthoracle;

pub use error::{Error, Result};
