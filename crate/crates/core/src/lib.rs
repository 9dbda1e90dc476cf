//! Stereo disparity estimation from rectified image pairs.
//!
//! The pipeline computes a per-pixel matching cost — either a plain
//! sum-of-absolute-differences baseline or the output of a small trainable
//! convolutional network scoring 9×9 patch pairs — and refines it into a
//! dense disparity map:
//!
//! 1. cost volume construction ([`cost`])
//! 2. cross-based cost aggregation over adaptive support regions ([`cbca`])
//! 3. semiglobal matching along four scanline directions ([`sgm`])
//! 4. a second round of cross-based aggregation
//! 5. winner-take-all selection, left-right consistency, interpolation,
//!    subpixel fit, border enlargement, median and bilateral filtering
//!    ([`postproc`])
//!
//! [`pipeline::predict`] runs the whole chain; [`net`] holds the matching
//! network together with its training loop; [`dataset`] builds the binary
//! patch-pair classification set the network is trained on.
//!
//! The crate is `no_std` (with `alloc`): all operations are pure functions
//! over in-memory rasters, and every result is deterministic given the
//! inputs and seeds. File formats and the command-line driver live in the
//! companion `stereomatch` crate.

#![no_std]

extern crate alloc;

pub mod cbca;
pub mod cost;
pub mod dataset;
mod error;
pub mod imaging;
pub mod net;
pub mod pipeline;
pub mod postproc;
pub mod sgm;

pub use error::{Error, Result};
