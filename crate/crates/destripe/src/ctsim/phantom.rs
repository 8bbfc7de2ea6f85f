//! Analytic ellipse phantoms: attenuation at a point is the sum of the
//! values of all ellipses covering it, so line integrals are sums of
//! chord lengths with exact closed forms.

use crate::error::{Error, Result};
use crate::grid::Grid2;

/// One additive ellipse: center (mm), semi-axes (mm), rotation (rad), and
/// the attenuation it contributes inside (mm^-1).
#[derive(Debug, Clone)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    pub value: f64,
}

impl Ellipse {
    /// Maps a point into the frame where the ellipse is axis-aligned at the
    /// origin.
    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.to_local(x, y);
        (lx / self.a).powi(2) + (ly / self.b).powi(2) <= 1.0
    }

    /// Chord length cut from the line `origin + t * dir` (`dir` unit).
    pub fn chord(&self, origin: (f64, f64), dir: (f64, f64)) -> f64 {
        let (ox, oy) = self.to_local(origin.0, origin.1);
        let (s, c) = self.theta.sin_cos();
        let dx = c * dir.0 + s * dir.1;
        let dy = -s * dir.0 + c * dir.1;
        let (qa, qb) = (self.a, self.b);
        let aa = (dx / qa).powi(2) + (dy / qb).powi(2);
        let bb = 2.0 * (ox * dx / (qa * qa) + oy * dy / (qb * qb));
        let cc = (ox / qa).powi(2) + (oy / qb).powi(2) - 1.0;
        let disc = bb * bb - 4.0 * aa * cc;
        if disc <= 0.0 {
            return 0.0;
        }
        disc.sqrt() / aa
    }

    /// Radius of a circle around the isocenter guaranteed to contain the
    /// ellipse.
    pub fn support_radius(&self) -> f64 {
        (self.cx * self.cx + self.cy * self.cy).sqrt() + self.a.max(self.b)
    }
}

/// A list of additive ellipses plus the raster size used when an image-domain
/// version is needed.
#[derive(Debug, Clone)]
pub struct EllipsePhantom {
    pub ellipses: Vec<Ellipse>,
    pub raster_size: usize,
}

impl EllipsePhantom {
    pub fn mu_at(&self, x: f64, y: f64) -> f64 {
        self.ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.value).sum()
    }

    pub fn support_radius(&self) -> f64 {
        self.ellipses.iter().map(|e| e.support_radius()).fold(0.0, f64::max)
    }

    /// Line integral along `origin + t * dir` (`dir` unit): exact sum of
    /// chord lengths.
    pub fn line_integral(&self, origin: (f64, f64), dir: (f64, f64)) -> f64 {
        self.ellipses.iter().map(|e| e.value * e.chord(origin, dir)).sum()
    }

    /// Rasterizes over the square `[-half_width, half_width]^2`; row 0 is the
    /// top of the image. Each pixel averages a 4x4 subsample grid so edge
    /// pixels carry coverage fractions instead of staircased membership.
    pub fn raster(&self, half_width: f64) -> Grid2 {
        const SUB: usize = 4;
        let size = self.raster_size;
        let px = 2.0 * half_width / size as f64;
        Grid2::from_fn(size, size, |i, j| {
            let mut acc = 0.0;
            for a in 0..SUB {
                for b in 0..SUB {
                    let x = -half_width + (j as f64 + (b as f64 + 0.5) / SUB as f64) * px;
                    let y = half_width - (i as f64 + (a as f64 + 0.5) / SUB as f64) * px;
                    acc += self.mu_at(x, y);
                }
            }
            acc / (SUB * SUB) as f64
        })
    }
}

/// Attenuation assigned to one unit of the standard phantom table, fixed so
/// the peak desk-scale line integral sits near 3 (a realistic post-log
/// sinogram magnitude for the simulated photon budget).
pub const SHEPP_LOGAN_ATTENUATION_SCALE: f64 = 0.11;

/// The phantom occupies this fraction of the field-of-view radius.
pub const PHANTOM_FOV_FRACTION: f64 = 0.9;

const SHEPP_LOGAN_TABLE: [(f64, f64, f64, f64, f64, f64); 10] = [
    // (value, a, b, cx, cy, theta_deg) in the unit disk.
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// Builds a named phantom scaled to the given field-of-view radius along
/// with its raster.
pub fn make_phantom(
    name: &str,
    raster_size: usize,
    fov_radius_mm: f64,
) -> Result<(EllipsePhantom, Grid2)> {
    if raster_size < 2 {
        return Err(Error::Config(format!("raster size must be at least 2, got {raster_size}")));
    }
    if !(fov_radius_mm > 0.0) {
        return Err(Error::Config(format!("field of view must be positive, got {fov_radius_mm}")));
    }
    let scale = PHANTOM_FOV_FRACTION * fov_radius_mm;
    let ellipses = match name {
        "shepp-logan" => SHEPP_LOGAN_TABLE
            .iter()
            .map(|&(v, a, b, cx, cy, deg)| Ellipse {
                cx: cx * scale,
                cy: cy * scale,
                a: a * scale,
                b: b * scale,
                theta: deg.to_radians(),
                value: v * SHEPP_LOGAN_ATTENUATION_SCALE,
            })
            .collect(),
        "disks" => vec![
            Ellipse {
                cx: 0.0,
                cy: 0.0,
                a: 0.6 * scale,
                b: 0.6 * scale,
                theta: 0.0,
                value: 0.02,
            },
            Ellipse {
                cx: 0.28 * scale,
                cy: 0.18 * scale,
                a: 0.12 * scale,
                b: 0.12 * scale,
                theta: 0.0,
                value: 0.012,
            },
            Ellipse {
                cx: -0.22 * scale,
                cy: -0.25 * scale,
                a: 0.09 * scale,
                b: 0.09 * scale,
                theta: 0.0,
                value: -0.008,
            },
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown phantom '{other}' (expected shepp-logan or disks)"
            )))
        }
    };
    let phantom = EllipsePhantom { ellipses, raster_size };
    let raster = phantom.raster(fov_radius_mm);
    Ok((phantom, raster))
}
