//! Gradient-based regularizers for the two model outputs.
//!
//! The ideal sinogram is penalized along the detector axis with a weighted
//! L2 norm of adjacent-column differences; the stripe field is penalized
//! along the angle axis with an L1 norm of adjacent-row differences. Both
//! differences wrap cyclically by default.

use std::rc::Rc;
use std::str::FromStr;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::grid::Grid2;

/// Which regularization terms the training loss includes and whether the
/// per-column sorting step is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegMode {
    /// Stripe smoothness only.
    SaOnly,
    /// Unweighted ideal-sinogram smoothness only.
    IsOnly,
    /// Both terms, ideal-sinogram term unweighted.
    Both,
    /// Both terms, ideal-sinogram term intensity-weighted. The default.
    BothWeighted,
    /// Both terms with weighting but no sorting step.
    BothUnsorted,
}

impl RegMode {
    pub fn uses_is(self) -> bool {
        !matches!(self, RegMode::SaOnly)
    }

    pub fn uses_sa(self) -> bool {
        !matches!(self, RegMode::IsOnly)
    }

    pub fn weighted(self) -> bool {
        matches!(self, RegMode::BothWeighted | RegMode::BothUnsorted)
    }

    pub fn sorted(self) -> bool {
        !matches!(self, RegMode::BothUnsorted)
    }

    pub fn name(self) -> &'static str {
        match self {
            RegMode::SaOnly => "sa-only",
            RegMode::IsOnly => "is-only",
            RegMode::Both => "both",
            RegMode::BothWeighted => "both-weighted",
            RegMode::BothUnsorted => "both-unsorted",
        }
    }
}

impl FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sa-only" => Ok(RegMode::SaOnly),
            "is-only" => Ok(RegMode::IsOnly),
            "both" => Ok(RegMode::Both),
            "both-weighted" => Ok(RegMode::BothWeighted),
            "both-unsorted" => Ok(RegMode::BothUnsorted),
            other => Err(Error::Config(format!("unknown regularizer mode '{other}'"))),
        }
    }
}

/// Shared knobs for both regularizers.
#[derive(Debug, Clone, Copy)]
pub struct RegOptions {
    /// Wrap differences around the last column/row (default). When false the
    /// gradient drops its final column/row instead.
    pub cyclic: bool,
    /// Report mean-style magnitudes (L1 divided by entry count, L2 divided by
    /// its square root) so values are comparable across sizes.
    pub size_normalized: bool,
}

impl Default for RegOptions {
    fn default() -> Self {
        Self { cyclic: true, size_normalized: false }
    }
}

/// Adjacent-column differences `S[i,j] - S[i,j+1]`. Cyclic output keeps the
/// input shape with the last column wrapping to the first; non-cyclic output
/// has one fewer column.
pub fn grad_detector(s: &Grid2, cyclic: bool) -> Grid2 {
    let (m, n) = (s.rows(), s.cols());
    let out_cols = if cyclic { n } else { n.saturating_sub(1) };
    Grid2::from_fn(m, out_cols, |i, j| s.at(i, j) - s.at(i, (j + 1) % n))
}

/// Adjacent-row differences `S[i,j] - S[i+1,j]`. Cyclic output keeps the
/// input shape with the last row wrapping to the first; non-cyclic output
/// has one fewer row.
pub fn grad_angular(s: &Grid2, cyclic: bool) -> Grid2 {
    let (m, n) = (s.rows(), s.cols());
    let out_rows = if cyclic { m } else { m.saturating_sub(1) };
    Grid2::from_fn(out_rows, n, |i, j| s.at(i, j) - s.at((i + 1) % m, j))
}

/// Intensity weights `W = S / max(S)` used by the weighted ideal-sinogram
/// term; treated as constants by the gradient computation. Returns the
/// weight grid and whether the uniform fallback fired (when `max(S) <= 0`
/// the weights are all one).
pub fn is_weights(s: &Grid2) -> (Grid2, bool) {
    let max = s.max().unwrap_or(0.0);
    if max <= 0.0 {
        log::warn!("non-positive maximum {max}; using uniform weights");
        return (Grid2::from_fn(s.rows(), s.cols(), |_, _| 1.0), true);
    }
    (Grid2::from_fn(s.rows(), s.cols(), |i, j| s.at(i, j) / max), false)
}

/// Restricts a full-shape weight grid to the detector-gradient shape.
pub fn restrict_weights(w: &Grid2, cyclic: bool) -> Vec<f64> {
    if cyclic {
        return w.data().to_vec();
    }
    let cols = w.cols().saturating_sub(1);
    let mut out = Vec::with_capacity(w.rows() * cols);
    for i in 0..w.rows() {
        for j in 0..cols {
            out.push(w.at(i, j));
        }
    }
    out
}

/// Ideal-sinogram smoothness: L2 norm of (optionally weighted) detector
/// gradients.
pub fn psi_is_grid(s: &Grid2, weighted: bool, opts: RegOptions) -> f64 {
    let g = grad_detector(s, opts.cyclic);
    let w = if weighted { Some(restrict_weights(&is_weights(s).0, opts.cyclic)) } else { None };
    let mut acc = 0.0;
    for (k, &gv) in g.data().iter().enumerate() {
        let v = match &w {
            Some(w) => w[k] * gv,
            None => gv,
        };
        acc += v * v;
    }
    if opts.size_normalized && !g.data().is_empty() {
        acc /= g.len() as f64;
    }
    acc.sqrt()
}

/// Stripe smoothness: L1 norm of angular gradients.
pub fn psi_sa_grid(s: &Grid2, opts: RegOptions) -> f64 {
    let g = grad_angular(s, opts.cyclic);
    let acc: f64 = g.data().iter().map(|v| v.abs()).sum();
    if opts.size_normalized && !g.data().is_empty() {
        acc / g.len() as f64
    } else {
        acc
    }
}

/// Paired flat index lists such that a difference grid is
/// `gather(s, left) - gather(s, right)`.
#[derive(Debug, Clone)]
pub struct DiffIndices {
    pub left: Rc<Vec<u32>>,
    pub right: Rc<Vec<u32>>,
}

impl DiffIndices {
    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

/// Index pairs for the detector-axis difference over an `M x N` grid.
pub fn detector_indices(m: usize, n: usize, cyclic: bool) -> DiffIndices {
    let cols = if cyclic { n } else { n.saturating_sub(1) };
    let mut left = Vec::with_capacity(m * cols);
    let mut right = Vec::with_capacity(m * cols);
    for i in 0..m {
        for j in 0..cols {
            left.push((i * n + j) as u32);
            right.push((i * n + (j + 1) % n) as u32);
        }
    }
    DiffIndices { left: Rc::new(left), right: Rc::new(right) }
}

/// Index pairs for the angle-axis difference over an `M x N` grid.
pub fn angular_indices(m: usize, n: usize, cyclic: bool) -> DiffIndices {
    let rows = if cyclic { m } else { m.saturating_sub(1) };
    let mut left = Vec::with_capacity(rows * n);
    let mut right = Vec::with_capacity(rows * n);
    for i in 0..rows {
        for j in 0..n {
            left.push((i * n + j) as u32);
            right.push((((i + 1) % m) * n + j) as u32);
        }
    }
    DiffIndices { left: Rc::new(left), right: Rc::new(right) }
}

/// Tape version of [`psi_is_grid`]. `weights`, when given, must already be
/// restricted to the gradient shape and is treated as a constant.
pub fn psi_is_node(
    tape: &mut Tape,
    s: NodeId,
    idx: &DiffIndices,
    weights: Option<Vec<f64>>,
    size_normalized: bool,
) -> Result<NodeId> {
    let len = idx.len();
    let a = tape.gather(s, idx.left.clone())?;
    let b = tape.gather(s, idx.right.clone())?;
    let mut g = tape.sub(a, b)?;
    if let Some(w) = weights {
        if w.len() != len {
            return Err(Error::InvalidShape(format!(
                "weight length {} does not match gradient length {len}",
                w.len()
            )));
        }
        let wn = tape.constant(w);
        g = tape.mul(wn, g)?;
    }
    let sq = tape.mul(g, g)?;
    let mut ssum = tape.sum(sq);
    if size_normalized && len > 0 {
        ssum = tape.scale(ssum, 1.0 / len as f64);
    }
    Ok(tape.sqrt(ssum))
}

/// Tape version of [`psi_sa_grid`].
pub fn psi_sa_node(
    tape: &mut Tape,
    s: NodeId,
    idx: &DiffIndices,
    size_normalized: bool,
) -> Result<NodeId> {
    let a = tape.gather(s, idx.left.clone())?;
    let b = tape.gather(s, idx.right.clone())?;
    let g = tape.sub(a, b)?;
    let abs = tape.abs(g);
    let total = tape.sum(abs);
    if size_normalized && !idx.is_empty() {
        Ok(tape.scale(total, 1.0 / idx.len() as f64))
    } else {
        Ok(total)
    }
}
