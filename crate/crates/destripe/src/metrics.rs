//! Image-quality metrics: mean squared error, peak signal-to-noise ratio,
//! structural similarity, and Pearson correlation.
//!
//! PSNR and SSIM take the second argument as the reference; its value range
//! sets the peak and the dynamic range. SSIM uses the standard 11x11
//! Gaussian window with sigma 1.5 and stability constants K1 = 0.01,
//! K2 = 0.03, averaged over all fully interior window positions.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Grid2;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// The three scores reported together on standard output.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

fn check_shapes(a: &Grid2, reference: &Grid2) -> Result<()> {
    a.check_same_shape(reference, "reference")
}

/// Mean squared error against the reference.
pub fn mse(a: &Grid2, reference: &Grid2) -> Result<f64> {
    check_shapes(a, reference)?;
    let n = a.len() as f64;
    let acc: f64 =
        a.data().iter().zip(reference.data()).map(|(x, r)| (x - r) * (x - r)).sum();
    Ok(acc / n)
}

/// `10 log10(peak^2 / MSE)` with the peak taken as the reference's value
/// range. Identical inputs yield the positive-infinity sentinel.
pub fn psnr(a: &Grid2, reference: &Grid2) -> Result<f64> {
    check_shapes(a, reference)?;
    let peak = range_of(reference)?;
    let err = mse(a, reference)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

fn range_of(g: &Grid2) -> Result<f64> {
    let lo = g.min().ok_or_else(|| Error::InvalidShape("empty grid".into()))?;
    let hi = g.max().ok_or_else(|| Error::InvalidShape("empty grid".into()))?;
    if hi == lo {
        return Err(Error::DegenerateRange(format!("reference is constant at {lo}")));
    }
    Ok(hi - lo)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (t, v) in k.iter_mut().enumerate() {
        let d = t as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable valid-mode convolution with the same 1D kernel along both axes.
fn blur_valid(src: &Grid2, k: &[f64; SSIM_WINDOW]) -> Grid2 {
    let (h, w) = (src.rows(), src.cols());
    let wv = w - (SSIM_WINDOW - 1);
    let mut horiz = Grid2::zeros(h, wv);
    for i in 0..h {
        for j in 0..wv {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * src.at(i, j + t);
            }
            horiz.set(i, j, acc);
        }
    }
    let hv = h - (SSIM_WINDOW - 1);
    let mut out = Grid2::zeros(hv, wv);
    for i in 0..hv {
        for j in 0..wv {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * horiz.at(i + t, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Mean structural similarity. The dynamic range comes from the reference by
/// default; `union_range` widens it to both inputs, making the score exactly
/// symmetric in its arguments.
pub fn ssim(a: &Grid2, reference: &Grid2, union_range: bool) -> Result<f64> {
    check_shapes(a, reference)?;
    if a.rows() < SSIM_WINDOW || a.cols() < SSIM_WINDOW {
        return Err(Error::InvalidShape(format!(
            "similarity window needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let range = if union_range {
        let lo = a.min().unwrap().min(reference.min().unwrap());
        let hi = a.max().unwrap().max(reference.max().unwrap());
        if hi == lo {
            return Err(Error::DegenerateRange(format!("inputs are constant at {lo}")));
        }
        hi - lo
    } else {
        range_of(reference)?
    };
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);

    let k = gaussian_kernel();
    let xx = Grid2::from_fn(a.rows(), a.cols(), |i, j| a.at(i, j) * a.at(i, j));
    let yy = Grid2::from_fn(a.rows(), a.cols(), |i, j| reference.at(i, j) * reference.at(i, j));
    let xy = Grid2::from_fn(a.rows(), a.cols(), |i, j| a.at(i, j) * reference.at(i, j));
    let mx = blur_valid(a, &k);
    let my = blur_valid(reference, &k);
    let exx = blur_valid(&xx, &k);
    let eyy = blur_valid(&yy, &k);
    let exy = blur_valid(&xy, &k);

    let mut acc = 0.0;
    for i in 0..mx.rows() {
        for j in 0..mx.cols() {
            let (ux, uy) = (mx.at(i, j), my.at(i, j));
            let vx = exx.at(i, j) - ux * ux;
            let vy = eyy.at(i, j) - uy * uy;
            let cov = exy.at(i, j) - ux * uy;
            let num = (2.0 * ux * uy + c1) * (2.0 * cov + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            acc += num / den;
        }
    }
    Ok(acc / (mx.rows() * mx.cols()) as f64)
}

/// Pearson correlation coefficient between two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidShape(format!(
            "correlation needs equal nonempty lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateRange("constant sample has no correlation".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// All three scores with default settings (reference-range SSIM).
pub fn report(a: &Grid2, reference: &Grid2) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(a, reference)?,
        ssim: ssim(a, reference, false)?,
        mse: mse(a, reference)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Normal};

    fn noisy_pair(seed: u64, sigma: f64) -> (Grid2, Grid2) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let reference = Grid2::from_fn(24, 24, |i, j| {
            ((i as f64 / 5.0).sin() + (j as f64 / 7.0).cos() + 2.0) / 4.0
        });
        let dist = Normal::new(0.0, sigma).unwrap();
        let noisy = Grid2::from_fn(24, 24, |i, j| reference.at(i, j) + dist.sample(&mut rng));
        (noisy, reference)
    }

    #[test]
    fn identical_inputs_peg_both_metrics() {
        let (_, reference) = noisy_pair(1, 0.0);
        assert_eq!(psnr(&reference, &reference).unwrap(), f64::INFINITY);
        assert_eq!(ssim(&reference, &reference, false).unwrap(), 1.0);
        assert_eq!(mse(&reference, &reference).unwrap(), 0.0);
    }

    #[test]
    fn unit_range_and_centiunit_mse_give_twenty_db() {
        let reference = Grid2::from_fn(12, 12, |i, j| ((i * 12 + j) as f64) / 143.0);
        let shifted = Grid2::from_fn(12, 12, |i, j| reference.at(i, j) + 0.1);
        let e = mse(&shifted, &reference).unwrap();
        assert!((e - 0.01).abs() < 1e-15);
        let p = psnr(&shifted, &reference).unwrap();
        assert!((p - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let mut last = f64::INFINITY;
        for (k, sigma) in [0.01, 0.05, 0.2].iter().enumerate() {
            let (noisy, reference) = noisy_pair(40 + k as u64, *sigma);
            let p = psnr(&noisy, &reference).unwrap();
            assert!(p < last, "sigma={sigma}: {p} not below {last}");
            last = p;
        }
    }

    #[test]
    fn psnr_is_shift_invariant() {
        let (noisy, reference) = noisy_pair(7, 0.05);
        let base = psnr(&noisy, &reference).unwrap();
        for c in [0.5, -2.0, 16.0] {
            let a = Grid2::from_fn(24, 24, |i, j| noisy.at(i, j) + c);
            let r = Grid2::from_fn(24, 24, |i, j| reference.at(i, j) + c);
            let shifted = psnr(&a, &r).unwrap();
            assert!((shifted - base).abs() < 1e-9, "c={c}: {shifted} vs {base}");
        }
    }

    #[test]
    fn degenerate_and_mismatched_inputs_error() {
        let a = Grid2::zeros(12, 12);
        let flat = Grid2::from_fn(12, 12, |_, _| 3.0);
        assert!(matches!(psnr(&a, &flat), Err(Error::DegenerateRange(_))));
        let b = Grid2::zeros(12, 13);
        assert!(matches!(psnr(&a, &b), Err(Error::InvalidShape(_))));
        assert!(matches!(ssim(&a, &b, false), Err(Error::InvalidShape(_))));
        let tiny = Grid2::from_fn(10, 40, |i, j| (i + j) as f64);
        let tiny2 = tiny.clone();
        assert!(matches!(ssim(&tiny, &tiny2, false), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn constant_offset_dims_luminance_only() {
        let reference = Grid2::from_fn(32, 32, |i, j| {
            0.5 + 0.3 * (i as f64 / 6.0).sin() + 0.2 * (j as f64 / 9.0).cos()
        });
        let range = reference.max().unwrap() - reference.min().unwrap();
        let c = 0.1 * range;
        let offset = Grid2::from_fn(32, 32, |i, j| reference.at(i, j) + c);
        let score = ssim(&offset, &reference, false).unwrap();
        assert!(score < 1.0);

        // With equal variance and covariance the local score reduces to the
        // luminance term; its minimum over windows bounds the mean below.
        let k = gaussian_kernel();
        let mu = blur_valid(&reference, &k);
        let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
        let mut lower = f64::INFINITY;
        for i in 0..mu.rows() {
            for j in 0..mu.cols() {
                let ux = mu.at(i, j);
                let uy = ux + c;
                let l = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
                lower = lower.min(l);
            }
        }
        assert!(
            score > lower - 1e-9,
            "score {score} fell under the luminance bound {lower}"
        );
    }

    #[test]
    fn union_range_makes_ssim_symmetric() {
        let (a, b) = noisy_pair(11, 0.3);
        let ab = ssim(&a, &b, true).unwrap();
        let ba = ssim(&b, &a, true).unwrap();
        assert_eq!(ab, ba);
        // The default reference-range mode is directional.
        let fwd = ssim(&a, &b, false).unwrap();
        let bck = ssim(&b, &a, false).unwrap();
        assert!(fwd != bck || (fwd - ab).abs() < 1e-12);
    }

    #[test]
    fn ssim_stays_in_unit_interval() {
        for seed in 0..4u64 {
            let (a, b) = noisy_pair(seed, 0.5);
            let s = ssim(&a, &b, false).unwrap();
            assert!((-1.0..=1.0).contains(&s), "seed {seed}: {s}");
        }
        let reference = Grid2::from_fn(16, 16, |i, j| ((i + j) % 2) as f64);
        let inverted = Grid2::from_fn(16, 16, |i, j| 1.0 - reference.at(i, j));
        let s = ssim(&inverted, &reference, false).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!(s < 0.0, "anti-correlated pattern should score negative: {s}");
    }

    #[test]
    fn pearson_hits_the_poles() {
        let a: Vec<f64> = (0..50).map(|k| k as f64 * 0.3 - 4.0).collect();
        let b: Vec<f64> = a.iter().map(|v| 2.5 * v + 1.0).collect();
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|v| -0.5 * v + 3.0).collect();
        assert!((pearson(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        let flat = vec![2.0; 50];
        assert!(matches!(pearson(&a, &flat), Err(Error::DegenerateRange(_))));
        assert!(matches!(pearson(&a, &a[..10]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn report_bundles_all_three() {
        let (a, reference) = noisy_pair(3, 0.02);
        let r = report(&a, &reference).unwrap();
        assert_eq!(r.psnr_db, psnr(&a, &reference).unwrap());
        assert_eq!(r.ssim, ssim(&a, &reference, false).unwrap());
        assert_eq!(r.mse, mse(&a, &reference).unwrap());
        assert!(r.psnr_db.is_finite() && r.ssim < 1.0 && r.mse > 0.0);
    }
}
