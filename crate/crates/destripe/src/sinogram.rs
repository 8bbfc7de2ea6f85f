//! Sinogram domain types and operations: defect detection, min-max
//! normalization over reliable columns, and stable per-column sorting along
//! the angle axis together with its inverse permutation.
//!
//! Conventions: a sinogram is a `Grid2` with one row per view angle (M rows)
//! and one column per detector bin (N columns). Detector defects are assumed
//! constant over a scan, so masks are per-column.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::grid::Grid2;

/// A validated sinogram: finite values, at least 2 angles and 2 detectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram(Grid2);

impl Sinogram {
    pub fn new(grid: Grid2) -> Result<Self> {
        if grid.rows() < 2 || grid.cols() < 2 {
            return Err(Error::InvalidShape(format!(
                "sinogram needs at least 2x2 values, got {}x{}",
                grid.rows(),
                grid.cols()
            )));
        }
        if !grid.all_finite() {
            return Err(Error::NumericalFault("sinogram contains non-finite values".into()));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid2 {
        &self.0
    }

    pub fn into_grid(self) -> Grid2 {
        self.0
    }

    /// Number of view angles (rows).
    pub fn n_angles(&self) -> usize {
        self.0.rows()
    }

    /// Number of detector bins (columns).
    pub fn n_detectors(&self) -> usize {
        self.0.cols()
    }
}

impl Deref for Sinogram {
    type Target = Grid2;

    fn deref(&self) -> &Grid2 {
        &self.0
    }
}

/// Per-column reliability mask. `keep[j]` is true for reliable columns;
/// defective columns are excluded from data fitting and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectMask {
    n_angles: usize,
    keep: Vec<bool>,
}

impl DefectMask {
    pub fn new(n_angles: usize, keep: Vec<bool>) -> Result<Self> {
        if n_angles == 0 || keep.is_empty() {
            return Err(Error::InvalidShape("mask must cover at least one pixel".into()));
        }
        Ok(Self { n_angles, keep })
    }

    /// A mask keeping every column.
    pub fn keep_all(n_angles: usize, n_detectors: usize) -> Self {
        Self { n_angles, keep: vec![true; n_detectors] }
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_detectors(&self) -> usize {
        self.keep.len()
    }

    pub fn is_kept(&self, col: usize) -> bool {
        self.keep[col]
    }

    pub fn keep_flags(&self) -> &[bool] {
        &self.keep
    }

    /// Indices of reliable columns, ascending.
    pub fn kept_columns(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&j| self.keep[j]).collect()
    }

    /// Indices of defective columns, ascending.
    pub fn defective_columns(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&j| !self.keep[j]).collect()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Errors unless the mask covers exactly the given sinogram shape.
    pub fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if self.n_angles == rows && self.keep.len() == cols {
            Ok(())
        } else {
            Err(Error::InvalidShape(format!(
                "mask {}x{} does not cover sinogram {rows}x{cols}",
                self.n_angles,
                self.keep.len()
            )))
        }
    }

    /// Expands to a 0/1 grid, 1 on reliable columns.
    pub fn to_grid(&self) -> Grid2 {
        Grid2::from_fn(self.n_angles, self.keep.len(), |_, j| {
            if self.keep[j] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Affine range parameters produced by [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub lo: f64,
    pub hi: f64,
}

impl NormParams {
    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Flags detector columns by their variation along the angle axis: a column
/// is reliable only when its mean absolute finite difference across views is
/// strictly greater than `mu`. Flat columns carry no plausible projection
/// signal (dead or saturated detector elements).
pub fn detect_defective(p: &Sinogram, mu: f64) -> Result<DefectMask> {
    if !(mu > 0.0) {
        return Err(Error::Config(format!("defect threshold must be > 0, got {mu}")));
    }
    let (m, n) = (p.rows(), p.cols());
    let mut keep = vec![true; n];
    for (j, kept) in keep.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..m - 1 {
            acc += (p.at(i + 1, j) - p.at(i, j)).abs();
        }
        *kept = acc / ((m - 1) as f64) > mu;
    }
    DefectMask::new(m, keep)
}

/// Min-max normalization with the range taken over reliable columns only.
/// Defective columns are transformed with the same affine map. The masked
/// minimum lands exactly on 0 and the masked maximum exactly on 1.
pub fn normalize(p: &Sinogram, mask: &DefectMask) -> Result<(Sinogram, NormParams)> {
    mask.check_shape(p.rows(), p.cols())?;
    let kept = mask.kept_columns();
    if kept.is_empty() {
        return Err(Error::EmptyMask("no reliable columns to normalize over".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..p.rows() {
        for &j in &kept {
            let v = p.at(i, j);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi == lo {
        return Err(Error::DegenerateRange(format!("masked range is a single value {lo}")));
    }
    let span = hi - lo;
    let mut out = p.grid().clone();
    out.map_inplace(|v| (v - lo) / span);
    Ok((Sinogram::new(out)?, NormParams { lo, hi }))
}

/// Inverse of [`normalize`]: maps `q` back through `lo + q * (hi - lo)`.
pub fn denormalize(q: &Sinogram, params: &NormParams) -> Result<Sinogram> {
    if !(params.hi > params.lo) {
        return Err(Error::DegenerateRange(format!(
            "normalization span [{}, {}] is empty",
            params.lo, params.hi
        )));
    }
    let mut out = q.grid().clone();
    let (lo, span) = (params.lo, params.span());
    out.map_inplace(|v| lo + v * span);
    Sinogram::new(out)
}

/// Row permutation applied independently to every column.
/// `source_row(i, j)` names the input row that sorting moved to output row
/// `i` of column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SortPerm {
    rows: usize,
    cols: usize,
    idx: Vec<u32>,
}

impl SortPerm {
    /// Builds a permutation from raw source-row indices, row-major. Each
    /// column must be a bijection on `{0..rows-1}`.
    pub fn from_raw(rows: usize, cols: usize, idx: Vec<u32>) -> Result<Self> {
        if rows == 0 || cols == 0 || idx.len() != rows * cols {
            return Err(Error::InvalidPermutation(format!(
                "{} indices cannot form a {rows}x{cols} permutation",
                idx.len()
            )));
        }
        let mut seen = vec![false; rows];
        for j in 0..cols {
            seen.fill(false);
            for i in 0..rows {
                let src = idx[i * cols + j] as usize;
                if src >= rows || seen[src] {
                    return Err(Error::InvalidPermutation(format!(
                        "column {j} is not a bijection on 0..{rows}"
                    )));
                }
                seen[src] = true;
            }
        }
        Ok(Self { rows, cols, idx })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn source_row(&self, row: usize, col: usize) -> usize {
        self.idx[row * self.cols + col] as usize
    }

    /// Flat gather indices: `out.data()[k] = input.data()[gather[k]]` applies
    /// this permutation to a grid stored row-major.
    pub fn gather_indices(&self) -> Vec<u32> {
        let mut flat = Vec::with_capacity(self.idx.len());
        for i in 0..self.rows {
            for j in 0..self.cols {
                flat.push(self.idx[i * self.cols + j] * self.cols as u32 + j as u32);
            }
        }
        flat
    }

    /// Permutation sending sorted rows back to their original positions.
    pub fn invert(&self) -> SortPerm {
        let mut inv = vec![0u32; self.idx.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                let src = self.idx[i * self.cols + j] as usize;
                inv[src * self.cols + j] = i as u32;
            }
        }
        SortPerm { rows: self.rows, cols: self.cols, idx: inv }
    }
}

/// Sorts every column ascending along the angle axis. The sort is stable:
/// equal values keep their original row order. Returns the sorted grid and
/// the permutation that produced it.
pub fn sort_columns(s: &Grid2) -> (Grid2, SortPerm) {
    let (m, n) = (s.rows(), s.cols());
    let mut idx = vec![0u32; m * n];
    let mut sorted = Grid2::zeros(m, n);
    let mut order: Vec<u32> = Vec::with_capacity(m);
    for j in 0..n {
        order.clear();
        order.extend(0..m as u32);
        order.sort_by(|&a, &b| s.at(a as usize, j).total_cmp(&s.at(b as usize, j)));
        for (i, &src) in order.iter().enumerate() {
            idx[i * n + j] = src;
            sorted.set(i, j, s.at(src as usize, j));
        }
    }
    (sorted, SortPerm { rows: m, cols: n, idx })
}

/// Applies a column-wise row permutation: `out[i][j] = x[perm(i, j)][j]`.
pub fn apply_perm(x: &Grid2, perm: &SortPerm) -> Result<Grid2> {
    if x.rows() != perm.rows || x.cols() != perm.cols {
        return Err(Error::InvalidShape(format!(
            "permutation {}x{} does not match grid {}x{}",
            perm.rows,
            perm.cols,
            x.rows(),
            x.cols()
        )));
    }
    let mut out = Grid2::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            out.set(i, j, x.at(perm.source_row(i, j), j));
        }
    }
    Ok(out)
}
