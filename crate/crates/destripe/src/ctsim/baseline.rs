//! Classical sorted-median reference method: sort each column, median-filter
//! each sorted row along the detector axis, and unsort. Stripes survive the
//! sort as column-wise outliers and the median removes them; smooth structure
//! becomes monotone rows the median barely touches.

use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::sinogram::{apply_perm, sort_columns, Sinogram};

/// Runs the sorted-median filter with an odd `window` of detector bins.
/// Edges replicate; a window of 1 is the identity.
pub fn sorted_median_baseline(p: &Sinogram, window: usize) -> Result<Sinogram> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!("median window must be odd, got {window}")));
    }
    let (sorted, perm) = sort_columns(p.grid());
    let (m, n) = (sorted.rows(), sorted.cols());
    let half = window / 2;
    let mut filtered = Grid2::zeros(m, n);
    let mut buf = vec![0.0; window];
    for i in 0..m {
        for j in 0..n {
            for (o, slot) in buf.iter_mut().enumerate() {
                let k = (j + o).saturating_sub(half).min(n - 1);
                *slot = sorted.at(i, k);
            }
            buf.sort_by(f64::total_cmp);
            filtered.set(i, j, buf[half]);
        }
    }
    Sinogram::new(apply_perm(&filtered, &perm.invert())?)
}
