//! Residual extraction and compensation: the fine detail the smooth model
//! misses is recovered from `E = P - P_IS - P_SA`, centered along the angle
//! axis so no per-column offset (a stripe in disguise) survives, and folded
//! back multiplicatively.

use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::sinogram::{DefectMask, Sinogram};

/// Residual grid plus the mask naming which columns are meaningful. Entries
/// in defective columns are zero by convention.
#[derive(Debug, Clone)]
pub struct ResidualField {
    pub e: Grid2,
    pub mask: DefectMask,
}

/// `E = P - P_IS - P_SA` on reliable pixels, zero on defective columns.
pub fn residual(
    p: &Grid2,
    is_hat: &Grid2,
    sa_hat: &Grid2,
    mask: &DefectMask,
) -> Result<ResidualField> {
    p.check_same_shape(is_hat, "ideal-sinogram prediction")?;
    p.check_same_shape(sa_hat, "stripe prediction")?;
    mask.check_shape(p.rows(), p.cols())?;
    let e = Grid2::from_fn(p.rows(), p.cols(), |i, j| {
        if mask.is_kept(j) {
            p.at(i, j) - is_hat.at(i, j) - sa_hat.at(i, j)
        } else {
            0.0
        }
    });
    Ok(ResidualField { e, mask: mask.clone() })
}

/// Subtracts each reliable column's mean along the angle axis; defective
/// columns stay zero. Idempotent: output columns have zero mean.
pub fn center_angular(field: &ResidualField) -> ResidualField {
    let (m, n) = (field.e.rows(), field.e.cols());
    let mut means = vec![0.0; n];
    for (j, mean) in means.iter_mut().enumerate() {
        if field.mask.is_kept(j) {
            *mean = (0..m).map(|i| field.e.at(i, j)).sum::<f64>() / m as f64;
        }
    }
    let e = Grid2::from_fn(m, n, |i, j| {
        if field.mask.is_kept(j) {
            field.e.at(i, j) - means[j]
        } else {
            0.0
        }
    });
    ResidualField { e, mask: field.mask.clone() }
}

/// `P_out = P_IS + kappa * P_IS * E~` on reliable pixels; defective columns
/// carry the raw prediction. `kappa = 0` returns the prediction unchanged.
/// No clamping: values may dip slightly negative and are only clamped at
/// file export.
pub fn compensate(is_hat: &Sinogram, e_tilde: &ResidualField, kappa: f64) -> Result<Sinogram> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::Config(format!("kappa must be >= 0, got {kappa}")));
    }
    is_hat.grid().check_same_shape(&e_tilde.e, "residual")?;
    if kappa == 0.0 {
        return Ok(is_hat.clone());
    }
    let out = Grid2::from_fn(is_hat.rows(), is_hat.cols(), |i, j| {
        let v = is_hat.at(i, j);
        if e_tilde.mask.is_kept(j) {
            v + kappa * v * e_tilde.e.at(i, j)
        } else {
            v
        }
    });
    Sinogram::new(out)
}
