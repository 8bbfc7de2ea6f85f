//! Fan-beam CT simulation harness: geometry, analytic and rasterized
//! projection of ellipse phantoms, detector corruption, filtered
//! back-projection, the sorted-median reference method, and radial ring
//! statistics for evaluating reconstructions.

pub mod baseline;
pub mod corrupt;
pub mod fbp;
pub mod geometry;
pub mod phantom;
pub mod project;
pub mod rings;

pub use baseline::sorted_median_baseline;
pub use corrupt::{corrupt, CorruptionRecord, CorruptionSpec};
pub use fbp::fbp_fan;
pub use geometry::FanBeamGeometry;
pub use phantom::{make_phantom, Ellipse, EllipsePhantom, SHEPP_LOGAN_ATTENUATION_SCALE};
pub use project::{project_fan, project_fan_analytic};
pub use rings::{peak_radius_mm, radial_profile_abs, ring_band_energy};
