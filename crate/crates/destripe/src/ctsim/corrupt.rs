//! The measurement model that turns a clean log-domain sinogram into a
//! ring-artifact testbed: per-column detector gains fixed across views,
//! Poisson photon noise, and a block of dead columns pinned to zero.

use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::sinogram::Sinogram;

/// Poisson rates are clamped into this range before sampling: the lower
/// bound avoids a degenerate distribution when `exp(-p)` underflows, the
/// upper keeps the sampler in its numerically valid regime.
const MIN_RATE: f64 = 1e-12;
const MAX_RATE: f64 = 1e15;

#[derive(Debug, Clone)]
pub struct CorruptionSpec {
    /// Fraction of detector columns receiving a gain error.
    pub gain_fraction: f64,
    /// Gains are drawn uniformly from `1 - a ..= 1 + a`.
    pub gain_amplitude: f64,
    /// Columns forced to exactly zero after the count model.
    pub dead_columns: Range<usize>,
    /// Incident photons per ray.
    pub i0: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    /// The reference experiment's corruption at full scale.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            gain_fraction: 0.5,
            gain_amplitude: 0.1,
            dead_columns: 400..405,
            i0: 1e5,
            seed,
        }
    }

    /// Same model with the dead block moved into the reduced detector.
    pub fn desk_scale(seed: u64) -> Self {
        Self { dead_columns: 200..205, ..Self::full_scale(seed) }
    }

    pub fn validate(&self, n_det: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gain_fraction) {
            return Err(Error::Config(format!(
                "gain fraction must be in [0, 1], got {}",
                self.gain_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.gain_amplitude) {
            return Err(Error::Config(format!(
                "gain amplitude must be in [0, 1), got {}",
                self.gain_amplitude
            )));
        }
        if !(self.i0 > 0.0) || !self.i0.is_finite() {
            return Err(Error::Config(format!("photon count must be positive, got {}", self.i0)));
        }
        if !self.dead_columns.is_empty() && self.dead_columns.end > n_det {
            return Err(Error::Config(format!(
                "dead columns {:?} outside detector of {n_det} bins",
                self.dead_columns
            )));
        }
        Ok(())
    }
}

/// Ground truth of one corruption run, for scoring detectors and gains.
#[derive(Debug, Clone)]
pub struct CorruptionRecord {
    /// Multiplicative gain per column; 1.0 where none was applied.
    pub gains: Vec<f64>,
    /// Columns that received a gain, ascending.
    pub gained_columns: Vec<usize>,
    /// Columns zeroed out, ascending.
    pub dead_columns: Vec<usize>,
}

/// Applies the corruption model. Draw order is fixed: gained columns are
/// chosen first, then one gain per chosen column in ascending column order,
/// then Poisson counts pixel by pixel in row-major order, so equal seeds
/// give bit-identical output.
pub fn corrupt(p: &Sinogram, spec: &CorruptionSpec) -> Result<(Sinogram, CorruptionRecord)> {
    let (m, n) = (p.rows(), p.cols());
    spec.validate(n)?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);

    let n_gained = (spec.gain_fraction * n as f64).floor() as usize;
    let mut gained: Vec<usize> = sample(&mut rng, n, n_gained).into_iter().collect();
    gained.sort_unstable();
    let mut gains = vec![1.0; n];
    let a = spec.gain_amplitude;
    for &j in &gained {
        gains[j] = if a == 0.0 { 1.0 } else { rng.gen_range(1.0 - a..=1.0 + a) };
    }

    let ln_i0 = spec.i0.ln();
    let mut out = Grid2::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let rate = (gains[j] * spec.i0 * (-p.at(i, j)).exp()).clamp(MIN_RATE, MAX_RATE);
            let counts = Poisson::new(rate)
                .map_err(|e| Error::NumericalFault(format!("count rate {rate}: {e}")))?
                .sample(&mut rng)
                .max(1.0);
            out.set(i, j, ln_i0 - counts.ln());
        }
    }
    for j in spec.dead_columns.clone() {
        for i in 0..m {
            out.set(i, j, 0.0);
        }
    }

    let record = CorruptionRecord {
        gains,
        gained_columns: gained,
        dead_columns: spec.dead_columns.clone().collect(),
    };
    Ok((Sinogram::new(out)?, record))
}
