//! Wide-and-deep prediction of one-year biomarker change from continuous
//! glucose monitoring and wrist actigraphy.
//!
//! Pipeline: [`ingest`] per-patient streams, fuse them with [`sync`], train
//! the [`net`] model with cross-validation in [`train`], score with [`eval`].
//! [`synthgen`] produces synthetic cohorts in the same file formats.

pub mod cli;
pub mod eval;
pub mod ingest;
pub mod net;
pub mod rng;
pub mod sync;
pub mod synthgen;
pub mod train;
