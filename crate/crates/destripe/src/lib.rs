//! Unsupervised removal of ring artifacts from fan-beam CT sinograms.
//!
//! Ring artifacts originate from miscalibrated or dead detector columns and
//! appear as stripes in the sinogram. This crate decomposes a corrupted
//! sinogram into an ideal part, represented by a small implicit neural
//! network over a multi-resolution feature grid, and a stripe part,
//! represented by a learnable per-pixel field. Both are fit jointly with
//! direction-aware regularizers computed on column-sorted views of the
//! sinogram, which separates smooth object structure from column-aligned
//! corruption without any training data.
//!
//! The crate also ships a fan-beam simulation harness (analytic and sampled
//! projectors, a noise and gain corruption model, filtered backprojection)
//! used to evaluate the method end to end, plus binary file formats, a
//! sorted-median baseline, and image quality metrics.

pub mod autodiff;
pub mod avec;
pub mod ctsim;
pub mod error;
pub mod formats;
pub mod grid;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod regularizers;
pub mod residual;
pub mod sinogram;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::Grid2;
pub use sinogram::{DefectMask, NormParams, Sinogram};
