//! Fan-beam forward projection: an exact chord-length projector for ellipse
//! phantoms and a numeric ray-marching projector over the rasterized
//! phantom.

use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::sinogram::Sinogram;

use super::geometry::FanBeamGeometry;
use super::phantom::EllipsePhantom;

/// Exact line integrals from the line-ellipse quadratic, one ray per
/// (view, bin). Rows are views, columns are detector bins.
pub fn project_fan_analytic(
    phantom: &EllipsePhantom,
    geom: &FanBeamGeometry,
) -> Result<Sinogram> {
    geom.validate()?;
    let mut out = Grid2::zeros(geom.n_views, geom.n_det);
    for v in 0..geom.n_views {
        let src = geom.source(v);
        for k in 0..geom.n_det {
            let dir = geom.ray_direction(v, k);
            out.set(v, k, phantom.line_integral(src, dir));
        }
    }
    Sinogram::new(out)
}

/// Numeric projector: marches each ray across the rasterized phantom with a
/// fixed step of a quarter pixel, sampling bilinearly.
pub fn project_fan(phantom: &EllipsePhantom, geom: &FanBeamGeometry) -> Result<Sinogram> {
    geom.validate()?;
    let fov = geom.fov_radius();
    let support = phantom.support_radius();
    if support > fov {
        return Err(Error::FieldOfView(format!(
            "phantom support radius {support:.3} mm exceeds the {fov:.3} mm field of view"
        )));
    }
    let raster = phantom.raster(fov);
    let size = phantom.raster_size;
    let px = 2.0 * fov / size as f64;
    let step = px / 4.0;

    let mut out = Grid2::zeros(geom.n_views, geom.n_det);
    for v in 0..geom.n_views {
        let src = geom.source(v);
        for k in 0..geom.n_det {
            let dir = geom.ray_direction(v, k);
            let Some((t0, t1)) = clip_to_square(src, dir, fov) else {
                continue;
            };
            let len = t1 - t0;
            if len <= 0.0 {
                continue;
            }
            let n = (len / step).ceil() as usize;
            let dt = len / n as f64;
            let mut acc = 0.0;
            for q in 0..n {
                let t = t0 + (q as f64 + 0.5) * dt;
                let x = src.0 + t * dir.0;
                let y = src.1 + t * dir.1;
                acc += sample_bilinear(&raster, fov, px, x, y);
            }
            out.set(v, k, acc * dt);
        }
    }
    Sinogram::new(out)
}

/// Parameter interval where the ray intersects the square
/// `[-half, half]^2`, or None if it misses.
fn clip_to_square(
    origin: (f64, f64),
    dir: (f64, f64),
    half: f64,
) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for (o, d) in [(origin.0, dir.0), (origin.1, dir.1)] {
        if d.abs() < 1e-300 {
            if o.abs() > half {
                return None;
            }
            continue;
        }
        let (mut a, mut b) = ((-half - o) / d, (half - o) / d);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Bilinear lookup at a physical point; the raster's pixel centers span
/// `[-half + px/2, half - px/2]` in both axes, row 0 on top.
fn sample_bilinear(raster: &Grid2, half: f64, px: f64, x: f64, y: f64) -> f64 {
    let size = raster.rows();
    let fj = (x + half) / px - 0.5;
    let fi = (half - y) / px - 0.5;
    if fi <= -1.0 || fj <= -1.0 || fi >= size as f64 || fj >= size as f64 {
        return 0.0;
    }
    let i0 = fi.floor();
    let j0 = fj.floor();
    let (wi, wj) = (fi - i0, fj - j0);
    let at = |i: f64, j: f64| -> f64 {
        if i < 0.0 || j < 0.0 || i > (size - 1) as f64 || j > (size - 1) as f64 {
            0.0
        } else {
            raster.at(i as usize, j as usize)
        }
    };
    at(i0, j0) * (1.0 - wi) * (1.0 - wj)
        + at(i0, j0 + 1.0) * (1.0 - wi) * wj
        + at(i0 + 1.0, j0) * wi * (1.0 - wj)
        + at(i0 + 1.0, j0 + 1.0) * wi * wj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctsim::phantom::{make_phantom, Ellipse};

    fn small_geom() -> FanBeamGeometry {
        FanBeamGeometry {
            n_det: 64,
            pitch_mm: 0.075 * 2068.0 / 64.0,
            n_views: 48,
            ..FanBeamGeometry::full_scale()
        }
    }

    fn centered_disk(r: f64, value: f64, raster: usize) -> EllipsePhantom {
        EllipsePhantom {
            ellipses: vec![Ellipse { cx: 0.0, cy: 0.0, a: r, b: r, theta: 0.0, value }],
            raster_size: raster,
        }
    }

    #[test]
    fn empty_phantom_projects_to_zero() {
        let g = small_geom();
        let empty = EllipsePhantom { ellipses: vec![], raster_size: 32 };
        let p = project_fan_analytic(&empty, &g).unwrap();
        assert!(p.grid().data().iter().all(|&v| v == 0.0));
        let p = project_fan(&empty, &g).unwrap();
        assert!(p.grid().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn central_ray_through_disk_sees_the_diameter() {
        let g = FanBeamGeometry {
            n_det: 65,
            pitch_mm: 0.075 * 2068.0 / 65.0,
            n_views: 8,
            ..FanBeamGeometry::full_scale()
        };
        let disk = centered_disk(20.0, 0.03, 32);
        let p = project_fan_analytic(&disk, &g).unwrap();
        let mid = 32;
        assert_eq!(g.u(mid), 0.0);
        for v in 0..8 {
            let got = p.at(v, mid);
            assert!((got - 2.0 * 20.0 * 0.03).abs() < 1e-12, "view {v}: {got}");
        }
    }

    #[test]
    fn ray_missing_everything_is_zero() {
        let g = small_geom();
        let off_axis = EllipsePhantom {
            ellipses: vec![Ellipse {
                cx: 30.0,
                cy: 0.0,
                a: 3.0,
                b: 3.0,
                theta: 0.0,
                value: 1.0,
            }],
            raster_size: 32,
        };
        let p = project_fan_analytic(&off_axis, &g).unwrap();
        // At view 90 degrees the phantom sits far to one side; the opposite
        // edge bin's ray cannot touch it.
        assert_eq!(p.at(12, 0) * p.at(12, 63), 0.0);
        assert!(p.grid().data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn numeric_tracks_analytic_closely() {
        let g = FanBeamGeometry::desk_scale();
        let (phantom, _) = make_phantom("shepp-logan", 512, g.fov_radius()).unwrap();
        let exact = project_fan_analytic(&phantom, &g).unwrap();
        let numeric = project_fan(&phantom, &g).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in numeric.grid().data().iter().zip(exact.grid().data()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-2, "relative L2 error {rel}");
    }

    #[test]
    fn oversized_phantom_is_rejected() {
        let g = small_geom();
        let too_big = centered_disk(g.fov_radius() + 1.0, 0.02, 32);
        assert!(matches!(project_fan(&too_big, &g), Err(Error::FieldOfView(_))));
        assert!(project_fan_analytic(&too_big, &g).is_ok());
    }

    #[test]
    fn projection_is_linear_in_the_phantom() {
        let g = small_geom();
        let p1 = centered_disk(15.0, 0.02, 64);
        let p2 = EllipsePhantom {
            ellipses: vec![Ellipse {
                cx: 8.0,
                cy: -6.0,
                a: 10.0,
                b: 5.0,
                theta: 0.7,
                value: 0.01,
            }],
            raster_size: 64,
        };
        let both = EllipsePhantom {
            ellipses: p1.ellipses.iter().chain(&p2.ellipses).cloned().collect(),
            raster_size: 64,
        };
        for (project, tol) in [
            (project_fan_analytic as fn(&EllipsePhantom, &FanBeamGeometry) -> Result<Sinogram>, 1e-10),
            (project_fan, 1e-6),
        ] {
            let a = project(&p1, &g).unwrap();
            let b = project(&p2, &g).unwrap();
            let ab = project(&both, &g).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for ((x, y), z) in a.grid().data().iter().zip(b.grid().data()).zip(ab.grid().data())
            {
                num += (x + y - z) * (x + y - z);
                den += z * z;
            }
            assert!((num / den).sqrt() < tol);
        }
    }

    #[test]
    fn conjugate_views_agree_for_symmetric_phantoms() {
        let g = small_geom();
        // Rotationally symmetric: opposite view with flipped detector.
        let disk = centered_disk(25.0, 0.02, 32);
        let p = project_fan_analytic(&disk, &g).unwrap();
        let half = g.n_views / 2;
        for v in 0..half {
            for k in 0..g.n_det {
                let a = p.at(v, k);
                let b = p.at(v + half, g.n_det - 1 - k);
                assert!((a - b).abs() < 1e-9, "({v},{k}): {a} vs {b}");
            }
        }
        // Point-symmetric but not rotationally symmetric: opposite view,
        // same bin.
        let pair = EllipsePhantom {
            ellipses: vec![
                Ellipse { cx: 12.0, cy: 5.0, a: 6.0, b: 3.0, theta: 0.4, value: 0.02 },
                Ellipse { cx: -12.0, cy: -5.0, a: 6.0, b: 3.0, theta: 0.4, value: 0.02 },
            ],
            raster_size: 32,
        };
        let p = project_fan_analytic(&pair, &g).unwrap();
        for v in 0..half {
            for k in 0..g.n_det {
                let a = p.at(v, k);
                let b = p.at(v + half, k);
                assert!((a - b).abs() < 1e-9, "({v},{k}): {a} vs {b}");
            }
        }
    }
}


