//! Shape-preserving synthesis of pathological lung CT slices and the
//! segmentation experiments built on top of it.

// `!(x > 0.0)` is how parameter checks reject NaN; the numeric kernels index several buffers in lockstep.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod cropping;
pub mod cyclegan;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod imaging;
pub mod io;
pub mod losses;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod seed;
pub mod segmentation;

pub use error::{Error, Result};
