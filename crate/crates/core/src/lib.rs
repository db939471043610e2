//! Dataset-distillation toolkit: per-sample importance scores from training
//! trajectories, class-balanced coreset selection, distillation objectives,
//! rank-correlation scoring of objectives, scaling-law fits and
//! patch-stitched distilled image sets.

pub mod ca2d;
pub mod dcs;
pub mod error;
pub mod io;
pub mod objectives;
pub mod scaling;
pub mod scores;
pub mod select;
pub mod trajstore;

pub use error::{Error, ErrorClass, Result};
