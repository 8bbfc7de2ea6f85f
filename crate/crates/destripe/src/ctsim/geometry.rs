//! Fan-beam scan geometry with a flat detector.
//!
//! The source orbits the isocenter at radius `sod_mm`; the flat detector sits
//! `sdd_mm` from the source, perpendicular to the central ray, with bins
//! spaced `pitch_mm` apart and the array centered on the central ray. Views
//! are uniformly spaced over a full turn starting at `angle0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanBeamGeometry {
    pub sdd_mm: f64,
    pub sod_mm: f64,
    pub n_det: usize,
    pub pitch_mm: f64,
    pub n_views: usize,
    pub angle0: f64,
}

impl FanBeamGeometry {
    /// The scanner of the reference experiment.
    pub fn full_scale() -> Self {
        Self {
            sdd_mm: 416.696,
            sod_mm: 297.143,
            n_det: 2068,
            pitch_mm: 0.075,
            n_views: 720,
            angle0: 0.0,
        }
    }

    /// Reduced geometry with the full-scale ratios preserved: the detector
    /// keeps its physical length with coarser bins, and half the views.
    pub fn desk_scale() -> Self {
        let full = Self::full_scale();
        Self {
            n_det: 512,
            pitch_mm: full.pitch_mm * full.n_det as f64 / 512.0,
            n_views: 360,
            ..full
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sdd_mm > self.sod_mm && self.sod_mm > 0.0) {
            return Err(Error::Config(format!(
                "need sdd > sod > 0, got sdd={} sod={}",
                self.sdd_mm, self.sod_mm
            )));
        }
        if !(self.pitch_mm > 0.0) || !self.pitch_mm.is_finite() {
            return Err(Error::Config(format!("detector pitch must be > 0, got {}", self.pitch_mm)));
        }
        if self.n_det < 2 {
            return Err(Error::Config(format!("need at least 2 detector bins, got {}", self.n_det)));
        }
        if self.n_views < 2 {
            return Err(Error::Config(format!("need at least 2 views, got {}", self.n_views)));
        }
        if !self.angle0.is_finite() {
            return Err(Error::Config(format!("start angle must be finite, got {}", self.angle0)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("geometry JSON: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("geometry serializes")
    }

    /// Rotation angle of view `v`, uniformly covering [angle0, angle0 + 2pi).
    pub fn view_angle(&self, v: usize) -> f64 {
        self.angle0 + 2.0 * std::f64::consts::PI * v as f64 / self.n_views as f64
    }

    /// Signed offset of bin `k`'s center from the central ray, on the
    /// physical detector (mm).
    pub fn u(&self, k: usize) -> f64 {
        (k as f64 - (self.n_det as f64 - 1.0) / 2.0) * self.pitch_mm
    }

    /// Half the detector's physical length (mm).
    pub fn detector_half_length(&self) -> f64 {
        self.n_det as f64 * self.pitch_mm / 2.0
    }

    /// Radius of the circle every ray of every view passes through: the scan
    /// field of view.
    pub fn fov_radius(&self) -> f64 {
        let gamma_max = (self.detector_half_length() / self.sdd_mm).atan();
        self.sod_mm * gamma_max.sin()
    }

    /// Source position at view `v`.
    pub fn source(&self, v: usize) -> (f64, f64) {
        let beta = self.view_angle(v);
        (self.sod_mm * beta.cos(), self.sod_mm * beta.sin())
    }

    /// Center position of detector bin `k` at view `v`.
    pub fn detector_bin(&self, v: usize, k: usize) -> (f64, f64) {
        let beta = self.view_angle(v);
        let (e_x, e_y) = (beta.cos(), beta.sin());
        let (t_x, t_y) = (-e_y, e_x);
        let u = self.u(k);
        // Central detector point: sdd along the ray from source through the
        // isocenter.
        let (c_x, c_y) = (
            self.sod_mm * e_x - self.sdd_mm * e_x,
            self.sod_mm * e_y - self.sdd_mm * e_y,
        );
        (c_x + u * t_x, c_y + u * t_y)
    }

    /// Unit direction of the ray from the source to bin `k` at view `v`.
    pub fn ray_direction(&self, v: usize, k: usize) -> (f64, f64) {
        let (s_x, s_y) = self.source(v);
        let (d_x, d_y) = self.detector_bin(v, k);
        let (r_x, r_y) = (d_x - s_x, d_y - s_y);
        let norm = (r_x * r_x + r_y * r_y).sqrt();
        (r_x / norm, r_y / norm)
    }

    /// Radius of the ring that a systematic error in detector bin `k` traces
    /// in the reconstruction: the distance from the isocenter at which the
    /// bin's ray is tangent.
    pub fn ring_radius(&self, k: usize) -> f64 {
        let u = self.u(k);
        self.sod_mm * u.abs() / (self.sdd_mm * self.sdd_mm + u * u).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_keep_ratios() {
        let full = FanBeamGeometry::full_scale();
        full.validate().unwrap();
        assert_eq!(full.sdd_mm, 416.696);
        assert_eq!(full.sod_mm, 297.143);
        assert_eq!(full.n_det, 2068);
        assert_eq!(full.pitch_mm, 0.075);
        assert_eq!(full.n_views, 720);

        let desk = FanBeamGeometry::desk_scale();
        desk.validate().unwrap();
        assert_eq!(desk.n_det, 512);
        assert_eq!(desk.n_views, 360);
        let full_len = full.n_det as f64 * full.pitch_mm;
        let desk_len = desk.n_det as f64 * desk.pitch_mm;
        assert!((full_len - desk_len).abs() < 1e-9);
        assert!((full.fov_radius() - desk.fov_radius()).abs() < 1e-9);
    }

    #[test]
    fn validation_rejects_inconsistent_geometry() {
        let base = FanBeamGeometry::desk_scale();
        let cases = [
            FanBeamGeometry { sdd_mm: 100.0, sod_mm: 200.0, ..base.clone() },
            FanBeamGeometry { sod_mm: 0.0, ..base.clone() },
            FanBeamGeometry { pitch_mm: 0.0, ..base.clone() },
            FanBeamGeometry { n_det: 1, ..base.clone() },
            FanBeamGeometry { n_views: 1, ..base.clone() },
            FanBeamGeometry { angle0: f64::NAN, ..base.clone() },
        ];
        for g in cases {
            assert!(g.validate().is_err());
        }
    }

    #[test]
    fn json_round_trip_uses_exact_keys() {
        let g = FanBeamGeometry::full_scale();
        let text = g.to_json();
        for key in ["sdd_mm", "sod_mm", "n_det", "pitch_mm", "n_views", "angle0"] {
            assert!(text.contains(&format!("\"{key}\"")), "missing {key} in {text}");
        }
        let back = FanBeamGeometry::from_json(&text).unwrap();
        assert_eq!(back, g);

        assert!(FanBeamGeometry::from_json("{\"sdd_mm\":1}").is_err());
        assert!(FanBeamGeometry::from_json(
            "{\"sdd_mm\":2.0,\"sod_mm\":1.0,\"n_det\":4,\"pitch_mm\":0.1,\"n_views\":4,\"angle0\":0.0,\"extra\":1}"
        )
        .is_err());
    }

    #[test]
    fn detector_coordinates_are_centered_and_spaced() {
        let g = FanBeamGeometry::desk_scale();
        assert!((g.u(0) + g.u(g.n_det - 1)).abs() < 1e-9);
        assert!((g.u(1) - g.u(0) - g.pitch_mm).abs() < 1e-12);
        let mid = (g.n_det - 1) as f64 / 2.0;
        assert_eq!(g.u(mid.floor() as usize) + g.pitch_mm / 2.0, 0.0);
    }

    #[test]
    fn rays_hit_their_bins() {
        let g = FanBeamGeometry::desk_scale();
        for (v, k) in [(0usize, 0usize), (90, 511), (245, 256)] {
            let (sx, sy) = g.source(v);
            let (dx, dy) = g.detector_bin(v, k);
            let (rx, ry) = g.ray_direction(v, k);
            let dist = ((dx - sx).powi(2) + (dy - sy).powi(2)).sqrt();
            assert!(((sx + dist * rx) - dx).abs() < 1e-9);
            assert!(((sy + dist * ry) - dy).abs() < 1e-9);
        }
    }

    #[test]
    fn central_ray_passes_through_isocenter() {
        let g = FanBeamGeometry {
            n_det: 11,
            ..FanBeamGeometry::desk_scale()
        };
        let k = 5;
        assert_eq!(g.u(k), 0.0);
        for v in [0, 7, 13] {
            let (sx, sy) = g.source(v);
            let (rx, ry) = g.ray_direction(v, k);
            // Cross product of direction with source->origin must vanish.
            let cross = rx * (0.0 - sy) - ry * (0.0 - sx);
            assert!(cross.abs() < 1e-9, "view {v}: {cross}");
        }
    }

    #[test]
    fn ring_radius_matches_tangent_distance() {
        let g = FanBeamGeometry::desk_scale();
        for k in [0, 100, 255, 256, 400, 511] {
            let expect = g.ring_radius(k);
            // Brute force: minimum distance from the isocenter to the ray.
            let (sx, sy) = g.source(0);
            let (rx, ry) = g.ray_direction(0, k);
            let t = -(sx * rx + sy * ry);
            let (px, py) = (sx + t * rx, sy + t * ry);
            let dist = (px * px + py * py).sqrt();
            assert!((dist - expect).abs() < 1e-9, "bin {k}: {dist} vs {expect}");
        }
        assert!(g.ring_radius(256) < g.ring_radius(400));
        let outermost = g.ring_radius(0).max(g.ring_radius(g.n_det - 1));
        assert!(outermost <= g.fov_radius() + 1e-9);
    }

    #[test]
    fn view_angles_cover_the_circle_uniformly() {
        let g = FanBeamGeometry::desk_scale();
        assert_eq!(g.view_angle(0), 0.0);
        let step = g.view_angle(1) - g.view_angle(0);
        for v in 1..g.n_views {
            assert!((g.view_angle(v) - g.view_angle(v - 1) - step).abs() < 1e-12);
        }
        assert!((g.view_angle(g.n_views - 1) + step - 2.0 * std::f64::consts::PI).abs() < 1e-9);
    }
}
