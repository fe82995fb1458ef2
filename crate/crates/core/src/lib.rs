//! Building footprint extraction at desk scale.
//!
//! The crate covers the whole chain from ground-truth preparation to
//! instance-level scoring:
//!
//! - [`raster`]: single- and multi-band grids, PGM/PPM/PFM IO, NDVI, band statistics.
//! - [`labels`]: exact signed distance transform and the 128-class distance labels.
//! - [`net`]: a small encoder-decoder pixel labeler (index unpooling or transposed
//!   convolution decoder) with its training loop and checkpoint format.
//! - [`fusion`]: equal-weight averaging of two softmax outputs.
//! - [`eval`]: pixel metrics, connected components, instance matching, size bins, site reports.
//! - [`ingest`]: footprint rasterization, NDVI filtering, shift alignment, chip extraction.
//! - [`tiling`]: halo-tiled parallel inference with deterministic stitching.
//! - [`synth`]: synthetic scenes used by tests and demos.

mod container;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod ingest;
pub mod labels;
pub mod net;
pub mod raster;
pub mod synth;
pub mod tiling;

pub use error::{Error, Result};
