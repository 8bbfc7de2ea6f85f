//! Reverse-mode automatic differentiation over flat `f64` arrays, plus the
//! Adam optimizer and a finite-difference gradient checker.
//!
//! The engine is a classic tape: every operation appends a node holding its
//! forward value and references to earlier nodes, so the node list is
//! topologically ordered by construction. `backward` walks the tape once in
//! reverse, freeing each node's gradient buffer as soon as it has been
//! propagated, and accumulates leaf gradients into a [`ParamStore`].
//!
//! Conventions, chosen for reproducibility: `relu'(0) = 0`, `abs'(0) = 0`,
//! `sqrt'(0) = 0`. All reductions run in a fixed order, so identical tapes
//! produce bit-identical gradients. Dense layers dispatch to the AVX-512
//! kernels in [`crate::kernels`] when the CPU supports them and the shape
//! matches, and otherwise fall back to `matrixmultiply`; both paths are
//! deterministic for fixed shapes on a given machine.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::avec::AVec;
use crate::error::{Error, Result};
use crate::formats::{Checkpoint, CHECKPOINT_VERSION};
use crate::kernels;

/// Handle to one named parameter array in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    value: Vec<f64>,
    grad: Vec<f64>,
}

/// Named flat parameter arrays with shape-mirrored gradient buffers.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter array under a unique name.
    pub fn register(&mut self, name: impl Into<String>, value: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let grad = vec![0.0; value.len()];
        self.entries.push(ParamEntry { name, value, grad });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    /// Number of parameter arrays.
    pub fn n_arrays(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        for (dst, src) in self.entries[id.0].grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    pub fn all_grads_finite(&self) -> bool {
        self.entries.iter().all(|e| e.grad.iter().all(|v| v.is_finite()))
    }

    /// All parameter values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for e in &self.entries {
            out.extend_from_slice(&e.value);
        }
        out
    }

    /// All gradients concatenated in registration order.
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for e in &self.entries {
            out.extend_from_slice(&e.grad);
        }
        out
    }

    /// Overwrites all values from a flat vector laid out as [`flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(Error::InvalidShape(format!(
                "flat vector of {} values cannot fill {} parameters",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            sections: self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect(),
        }
    }

    /// Loads values from a checkpoint; the section set must match the
    /// registered parameters exactly (names and lengths).
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.sections.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} sections, store has {} parameters",
                ckpt.sections.len(),
                self.entries.len()
            )));
        }
        for e in &mut self.entries {
            let vals = ckpt
                .section(&e.name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing section {:?}", e.name)))?;
            if vals.len() != e.value.len() {
                return Err(Error::Format(format!(
                    "section {:?} has {} values, expected {}",
                    e.name,
                    vals.len(),
                    e.value.len()
                )));
            }
            e.value.copy_from_slice(vals);
        }
        Ok(())
    }
}

/// Handle to one node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Precomputed 4-point interpolation plan: output point `p`, feature `f`
/// reads `sum_t w[p][t] * grid[idx[p][t] * features + f]`.
#[derive(Debug, Clone)]
pub struct BilinearPlan {
    pub n_vertices: usize,
    pub features: usize,
    pub idx: Vec<[u32; 4]>,
    pub w: Vec<[f64; 4]>,
}

enum Op {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Dot(NodeId, Rc<Vec<f64>>),
    Gather(NodeId, Rc<Vec<u32>>),
    Bilinear(NodeId, Rc<BilinearPlan>),
    ConcatCols { parts: Vec<NodeId>, rows: usize, widths: Vec<usize> },
    Linear { x: NodeId, w: NodeId, b: NodeId, in_dim: usize, out_dim: usize, relu: bool },
}

struct Node {
    op: Op,
    value: AVec,
    needs_grad: bool,
}

/// Recycles value and gradient buffers between tapes so iterative training
/// reuses resident pages instead of faulting fresh allocations every step.
/// Buffers come back with stale contents; every tape operation overwrites
/// its full output, so staleness never reaches results.
#[derive(Default)]
pub struct BufferPool {
    buckets: HashMap<usize, Vec<AVec>>,
}

/// At most this many spare buffers are kept per distinct length.
const POOL_BUCKET_CAP: usize = 8;

impl BufferPool {
    pub fn shared() -> Rc<RefCell<BufferPool>> {
        Rc::new(RefCell::new(BufferPool::default()))
    }

    fn take(&mut self, n: usize) -> AVec {
        match self.buckets.get_mut(&n).and_then(Vec::pop) {
            Some(buf) => buf,
            None => AVec::zeroed(n),
        }
    }

    fn give(&mut self, buf: AVec) {
        let bucket = self.buckets.entry(buf.len()).or_default();
        if bucket.len() < POOL_BUCKET_CAP {
            bucket.push(buf);
        }
    }
}

/// Append-only computation record. Node handles are only valid on the tape
/// that created them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pool: Option<Rc<RefCell<BufferPool>>>,
}

impl Drop for Tape {
    fn drop(&mut self) {
        if let Some(pool) = &self.pool {
            let mut pool = pool.borrow_mut();
            for node in self.nodes.drain(..) {
                pool.give(node.value);
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose buffers are drawn from and returned to `pool`.
    pub fn with_pool(pool: Rc<RefCell<BufferPool>>) -> Self {
        Tape { nodes: Vec::new(), pool: Some(pool) }
    }

    /// A buffer of length `n` with unspecified contents; the caller must
    /// write every element.
    fn alloc(&self, n: usize) -> AVec {
        match &self.pool {
            Some(pool) => pool.borrow_mut().take(n),
            None => AVec::zeroed(n),
        }
    }

    fn alloc_zeroed(&self, n: usize) -> AVec {
        let mut buf = self.alloc(n);
        buf.fill(0.0);
        buf
    }

    fn alloc_scalar(&self, v: f64) -> AVec {
        let mut buf = self.alloc(1);
        buf[0] = v;
        buf
    }

    fn release(&self, buf: AVec) {
        if let Some(pool) = &self.pool {
            pool.borrow_mut().give(buf);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: AVec, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn check_same_len(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        if la != lb {
            return Err(Error::InvalidShape(format!("{op}: lengths {la} vs {lb}")));
        }
        Ok(())
    }

    /// Leaf holding fixed values; receives no gradient.
    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        self.constant_slice(&values)
    }

    /// Like [`constant`](Self::constant), but copies from a slice.
    pub fn constant_slice(&mut self, values: &[f64]) -> NodeId {
        let mut v = self.alloc(values.len());
        v.copy_from_slice(values);
        self.push(Op::Constant, v, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        let v = self.alloc_scalar(v);
        self.push(Op::Constant, v, false)
    }

    /// Leaf bound to a parameter array; the current values are captured.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let src = store.value(id);
        let mut v = self.alloc(src.len());
        v.copy_from_slice(src);
        self.push(Op::Param(id), v, true)
    }

    fn zip_ew(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> AVec {
        let mut v = self.alloc(self.nodes[a.0].value.len());
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        for ((o, &x), &y) in v.iter_mut().zip(av).zip(bv) {
            *o = f(x, y);
        }
        v
    }

    fn map_ew(&mut self, a: NodeId, f: impl Fn(f64) -> f64) -> AVec {
        let mut v = self.alloc(self.nodes[a.0].value.len());
        for (o, &x) in v.iter_mut().zip(&self.nodes[a.0].value) {
            *o = f(x);
        }
        v
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "add")?;
        let v = self.zip_ew(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "sub")?;
        let v = self.zip_ew(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), v, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "mul")?;
        let v = self.zip_ew(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "div")?;
        let v = self.zip_ew(a, b, |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Div(a, b), v, ng))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.map_ew(a, |x| x * s);
        let ng = self.needs(a);
        self.push(Op::Scale(a, s), v, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.map_ew(a, |x| x.max(0.0));
        let ng = self.needs(a);
        self.push(Op::Relu(a), v, ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.map_ew(a, f64::abs);
        let ng = self.needs(a);
        self.push(Op::Abs(a), v, ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.map_ew(a, f64::sqrt);
        let ng = self.needs(a);
        self.push(Op::Sqrt(a), v, ng)
    }

    /// Sum of all elements, a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.iter().sum();
        let ng = self.needs(a);
        let v = self.alloc_scalar(v);
        self.push(Op::Sum(a), v, ng)
    }

    /// Weighted sum with constant weights, a scalar node.
    pub fn dot(&mut self, a: NodeId, weights: Rc<Vec<f64>>) -> Result<NodeId> {
        if weights.len() != self.nodes[a.0].value.len() {
            return Err(Error::InvalidShape(format!(
                "dot: {} weights vs {} values",
                weights.len(),
                self.nodes[a.0].value.len()
            )));
        }
        let v = self.nodes[a.0].value.iter().zip(weights.iter()).map(|(x, w)| x * w).sum();
        let ng = self.needs(a);
        let v = self.alloc_scalar(v);
        Ok(self.push(Op::Dot(a, weights), v, ng))
    }

    /// Element selection: `out[k] = a[idx[k]]`.
    pub fn gather(&mut self, a: NodeId, idx: Rc<Vec<u32>>) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        let n = src.len();
        if idx.iter().any(|&i| i as usize >= n) {
            return Err(Error::Index(format!("gather index out of range for {n} values")));
        }
        let mut v = self.alloc(idx.len());
        let src = &self.nodes[a.0].value;
        for (o, &i) in v.iter_mut().zip(idx.iter()) {
            *o = src[i as usize];
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Gather(a, idx), v, ng))
    }

    /// Four-point interpolation of per-vertex feature rows; see
    /// [`BilinearPlan`]. Output length is `plan.idx.len() * plan.features`.
    pub fn bilinear(&mut self, grid: NodeId, plan: Rc<BilinearPlan>) -> Result<NodeId> {
        let src = &self.nodes[grid.0].value;
        if src.len() != plan.n_vertices * plan.features {
            return Err(Error::InvalidShape(format!(
                "bilinear: grid has {} values, plan expects {}x{}",
                src.len(),
                plan.n_vertices,
                plan.features
            )));
        }
        if plan.idx.len() != plan.w.len() {
            return Err(Error::InvalidShape("bilinear: plan index/weight length mismatch".into()));
        }
        let f = plan.features;
        if plan.idx.iter().any(|q| q.iter().any(|&i| i as usize >= plan.n_vertices)) {
            return Err(Error::Index("bilinear vertex index out of range".into()));
        }
        let mut v = self.alloc(plan.idx.len() * f);
        let src = &self.nodes[grid.0].value;
        for (p, (quad, wts)) in plan.idx.iter().zip(&plan.w).enumerate() {
            for c in 0..f {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += wts[t] * src[quad[t] as usize * f + c];
                }
                v[p * f + c] = acc;
            }
        }
        let ng = self.needs(grid);
        Ok(self.push(Op::Bilinear(grid, plan), v, ng))
    }

    /// Row-wise concatenation of equal-height matrices: part `p` contributes
    /// `widths[p]` columns to every output row.
    pub fn concat_cols(&mut self, parts: &[NodeId], rows: usize) -> Result<NodeId> {
        if parts.is_empty() || rows == 0 {
            return Err(Error::InvalidShape("concat_cols needs parts and rows".into()));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let len = self.nodes[p.0].value.len();
            if len % rows != 0 {
                return Err(Error::InvalidShape(format!(
                    "concat_cols: part of {len} values not divisible by {rows} rows"
                )));
            }
            widths.push(len / rows);
        }
        let total: usize = widths.iter().sum();
        let mut v = self.alloc(rows * total);
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].value;
            for r in 0..rows {
                v[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec(), rows, widths }, v, ng))
    }

    /// Dense layer `y = x W + b` over row-major `x` (`rows x in_dim`),
    /// `w` (`in_dim x out_dim`), `b` (`out_dim`), optionally fused with ReLU.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        in_dim: usize,
        out_dim: usize,
        relu: bool,
    ) -> Result<NodeId> {
        let xl = self.nodes[x.0].value.len();
        let wl = self.nodes[w.0].value.len();
        let bl = self.nodes[b.0].value.len();
        if in_dim == 0 || out_dim == 0 || xl % in_dim != 0 {
            return Err(Error::InvalidShape(format!(
                "linear: input of {xl} values is not rows x {in_dim}"
            )));
        }
        if wl != in_dim * out_dim || bl != out_dim {
            return Err(Error::InvalidShape(format!(
                "linear: weight {wl} / bias {bl} do not match {in_dim}x{out_dim}"
            )));
        }
        let rows = xl / in_dim;
        let mut v = self.alloc(rows * out_dim);
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        if kernels::available() && out_dim == kernels::WIDE {
            kernels::fwd_wide(xv, wv, bv, &mut v, rows, in_dim, relu);
        } else if kernels::available() && out_dim == 1 && !relu {
            kernels::fwd_col(xv, wv, bv[0], &mut v, rows, in_dim);
        } else {
            // Expressed as y^T = W^T x^T (pure stride swaps over the same
            // buffers): the huge dimension packs as gemm's "n", which
            // measures ~35% faster here than the row-major orientation.
            unsafe {
                matrixmultiply::dgemm(
                    out_dim,
                    in_dim,
                    rows,
                    1.0,
                    wv.as_ptr(),
                    1,
                    out_dim as isize,
                    xv.as_ptr(),
                    1,
                    in_dim as isize,
                    0.0,
                    v.as_mut_ptr(),
                    1,
                    out_dim as isize,
                );
            }
            for r in 0..rows {
                for c in 0..out_dim {
                    let y = &mut v[r * out_dim + c];
                    *y += bv[c];
                    if relu && *y < 0.0 {
                        *y = 0.0;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear { x, w, b, in_dim, out_dim, relu }, v, ng))
    }

    /// Reverse pass from a scalar `root`. Zeroes the store's gradient
    /// buffers, then accumulates `d root / d param` for every parameter leaf
    /// reachable from the root; unreachable parameters keep zero gradients.
    pub fn backward(&self, root: NodeId, store: &mut ParamStore) -> Result<()> {
        let node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::InvalidRoot("root is not a node on this tape".into()))?;
        if node.value.len() != 1 {
            return Err(Error::InvalidRoot(format!(
                "root must be scalar, has {} values",
                node.value.len()
            )));
        }
        store.zero_grads();
        if !node.needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<AVec>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(self.alloc_scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(pid) => store.accumulate_grad(*pid, &g),
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |buf| add_assign(buf, &g));
                    self.acc(&mut grads, *b, |buf| add_assign(buf, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |buf| add_assign(buf, &g));
                    self.acc(&mut grads, *b, |buf| sub_assign(buf, &g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    self.acc(&mut grads, *a, |buf| {
                        for k in 0..buf.len() {
                            buf[k] += g[k] * bv[k];
                        }
                    });
                    self.acc(&mut grads, *b, |buf| {
                        for k in 0..buf.len() {
                            buf[k] += g[k] * av[k];
                        }
                    });
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    self.acc(&mut grads, *a, |buf| {
                        for k in 0..buf.len() {
                            buf[k] += g[k] / bv[k];
                        }
                    });
                    self.acc(&mut grads, *b, |buf| {
                        for k in 0..buf.len() {
                            buf[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                        }
                    });
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.acc(&mut grads, *a, |buf| {
                        for k in 0..buf.len() {
                            buf[k] += g[k] * s;
                        }
                    });
                }
                Op::Relu(a) => {
                    let out = &self.nodes[i].value;
                    self.acc(&mut grads, *a, |buf| {
                        for k in 0..buf.len() {
                            if out[k] > 0.0 {
                                buf[k] += g[k];
                            }
                        }
                    });
                }
                Op::Abs(a) => {
                    let av = &self.nodes[a.0].value;
                    self.acc(&mut grads, *a, |buf| {
                        for k in 0..buf.len() {
                            if av[k] > 0.0 {
                                buf[k] += g[k];
                            } else if av[k] < 0.0 {
                                buf[k] -= g[k];
                            }
                        }
                    });
                }
                Op::Sqrt(a) => {
                    let out = &self.nodes[i].value;
                    self.acc(&mut grads, *a, |buf| {
                        for k in 0..buf.len() {
                            if out[k] > 0.0 {
                                buf[k] += g[k] * 0.5 / out[k];
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    self.acc(&mut grads, *a, |buf| {
                        for v in buf.iter_mut() {
                            *v += g0;
                        }
                    });
                }
                Op::Dot(a, wts) => {
                    let g0 = g[0];
                    self.acc(&mut grads, *a, |buf| {
                        for (v, w) in buf.iter_mut().zip(wts.iter()) {
                            *v += g0 * w;
                        }
                    });
                }
                Op::Gather(a, idx) => {
                    self.acc(&mut grads, *a, |buf| {
                        for (k, &src) in idx.iter().enumerate() {
                            buf[src as usize] += g[k];
                        }
                    });
                }
                Op::Bilinear(grid, plan) => {
                    let f = plan.features;
                    self.acc(&mut grads, *grid, |buf| {
                        for (p, (quad, wts)) in plan.idx.iter().zip(&plan.w).enumerate() {
                            for c in 0..f {
                                let gp = g[p * f + c];
                                for t in 0..4 {
                                    buf[quad[t] as usize * f + c] += wts[t] * gp;
                                }
                            }
                        }
                    });
                }
                Op::ConcatCols { parts, rows, widths } => {
                    let total: usize = widths.iter().sum();
                    let mut col = 0;
                    for (&p, &w) in parts.iter().zip(widths) {
                        self.acc(&mut grads, p, |buf| {
                            for r in 0..*rows {
                                for c in 0..w {
                                    buf[r * w + c] += g[r * total + col + c];
                                }
                            }
                        });
                        col += w;
                    }
                }
                Op::Linear { x, w, b, in_dim, out_dim, relu } => {
                    let (in_dim, out_dim, relu) = (*in_dim, *out_dim, *relu);
                    let rows = self.nodes[x.0].value.len() / in_dim;
                    if kernels::available() && out_dim == kernels::WIDE {
                        self.backward_linear_wide(&mut grads, &g, i, *x, *w, *b, in_dim, rows, relu);
                    } else if kernels::available()
                        && out_dim == 1
                        && !relu
                        && in_dim == kernels::WIDE
                    {
                        self.backward_linear_col(&mut grads, &g, *x, *w, *b, rows);
                    } else {
                        self.backward_linear_generic(
                            &mut grads, &mut g, i, *x, *w, *b, in_dim, out_dim, relu, rows,
                        );
                    }
                }
            }
            self.release(g);
        }
        Ok(())
    }

    /// Ensures a zeroed gradient buffer for `id` and applies `f` to it,
    /// skipping nodes that cannot influence any parameter.
    fn acc(
        &self,
        grads: &mut [Option<AVec>],
        id: NodeId,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        if grads[id.0].is_none() {
            grads[id.0] = Some(self.alloc_zeroed(self.nodes[id.0].value.len()));
        }
        f(grads[id.0].as_mut().unwrap());
    }

    /// Kernel-backed backward for `out_dim == WIDE` layers. One sweep masks
    /// the gradient through the ReLU, accumulates the bias gradient, and
    /// (for supported input widths) produces the input gradient; the weight
    /// gradient follows from the masked-gradient scratch.
    #[allow(clippy::too_many_arguments)]
    fn backward_linear_wide(
        &self,
        grads: &mut [Option<AVec>],
        g: &[f64],
        node: usize,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        in_dim: usize,
        rows: usize,
        relu: bool,
    ) {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let outv = &self.nodes[node].value;
        let needs_x = self.needs(x);
        let kernel_dx = needs_x && (in_dim == kernels::WIDE || in_dim <= 8);
        let wt = if kernel_dx {
            let mut wt = self.alloc(kernels::WIDE * kernels::wt_stride(in_dim));
            kernels::transpose_wt(wv, in_dim, &mut wt);
            Some(wt)
        } else {
            None
        };
        let mut gm = self.alloc(rows * kernels::WIDE);
        let first_touch = kernel_dx && grads[x.0].is_none();
        if first_touch {
            grads[x.0] = Some(self.alloc(xv.len()));
        }
        let mut dx = if kernel_dx { grads[x.0].take() } else { None };
        let needs_b = self.needs(b);
        if needs_b && grads[b.0].is_none() {
            grads[b.0] = Some(self.alloc_zeroed(kernels::WIDE));
        }
        let mut db = match needs_b {
            true => grads[b.0].take().unwrap(),
            false => self.alloc_zeroed(kernels::WIDE),
        };
        kernels::bwd_wide(
            g,
            outv,
            wt.as_deref().unwrap_or(&[]),
            &mut gm,
            dx.as_deref_mut(),
            !first_touch,
            &mut db,
            rows,
            in_dim,
            relu,
        );
        if kernel_dx {
            grads[x.0] = dx;
        }
        if needs_b {
            grads[b.0] = Some(db);
        } else {
            self.release(db);
        }
        if needs_x && !kernel_dx {
            // Input widths the kernel does not cover: dX from the masked
            // gradient by gemm, first touch writing directly (beta 0).
            let first = grads[x.0].is_none();
            if first {
                grads[x.0] = Some(self.alloc(xv.len()));
            }
            let buf = grads[x.0].as_mut().unwrap();
            unsafe {
                matrixmultiply::dgemm(
                    in_dim,
                    kernels::WIDE,
                    rows,
                    1.0,
                    wv.as_ptr(),
                    kernels::WIDE as isize,
                    1,
                    gm.as_ptr(),
                    1,
                    kernels::WIDE as isize,
                    if first { 0.0 } else { 1.0 },
                    buf.as_mut_ptr(),
                    1,
                    in_dim as isize,
                );
            }
        }
        if self.needs(w) {
            if grads[w.0].is_none() {
                grads[w.0] = Some(self.alloc_zeroed(wv.len()));
            }
            let dw = grads[w.0].as_mut().unwrap();
            kernels::dw_wide(xv, &gm, dw, rows, in_dim);
        }
        self.release(gm);
        if let Some(wt) = wt {
            self.release(wt);
        }
    }

    /// Kernel-backed backward for the scalar head (`out_dim == 1`, no ReLU,
    /// `in_dim == WIDE`).
    fn backward_linear_col(
        &self,
        grads: &mut [Option<AVec>],
        g: &[f64],
        x: NodeId,
        w: NodeId,
        b: NodeId,
        rows: usize,
    ) {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let needs_x = self.needs(x);
        let first_touch = needs_x && grads[x.0].is_none();
        if first_touch {
            grads[x.0] = Some(self.alloc(xv.len()));
        }
        let mut dx = if needs_x { grads[x.0].take() } else { None };
        let needs_w = self.needs(w);
        if needs_w && grads[w.0].is_none() {
            grads[w.0] = Some(self.alloc_zeroed(kernels::WIDE));
        }
        let mut dw = match needs_w {
            true => grads[w.0].take().unwrap(),
            false => self.alloc_zeroed(kernels::WIDE),
        };
        let mut db = 0.0;
        kernels::bwd_col(g, xv, wv, dx.as_deref_mut(), !first_touch, &mut dw, &mut db, rows);
        if needs_x {
            grads[x.0] = dx;
        }
        if needs_w {
            grads[w.0] = Some(dw);
        } else {
            self.release(dw);
        }
        if self.needs(b) {
            self.acc(grads, b, |buf| buf[0] += db);
        }
    }

    /// Portable backward for dense layers of any shape.
    #[allow(clippy::too_many_arguments)]
    fn backward_linear_generic(
        &self,
        grads: &mut [Option<AVec>],
        g: &mut AVec,
        node: usize,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        in_dim: usize,
        out_dim: usize,
        relu: bool,
        rows: usize,
    ) {
        // One pass masks dY through the ReLU and accumulates the bias
        // gradient column sums.
        if relu {
            let out = &self.nodes[node].value;
            if self.needs(b) {
                self.acc(grads, b, |buf| {
                    for r in 0..rows {
                        for c in 0..out_dim {
                            let k = r * out_dim + c;
                            if out[k] <= 0.0 {
                                g[k] = 0.0;
                            } else {
                                buf[c] += g[k];
                            }
                        }
                    }
                });
            } else {
                for (gv, &o) in g.iter_mut().zip(out.iter()) {
                    if o <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
        } else if self.needs(b) {
            self.acc(grads, b, |buf| {
                for r in 0..rows {
                    for c in 0..out_dim {
                        buf[c] += g[r * out_dim + c];
                    }
                }
            });
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        // dX += dY W^T, expressed as dX^T = W dY^T for the faster packing;
        // the first touch writes directly (beta 0).
        if self.needs(x) {
            let first = grads[x.0].is_none();
            if first {
                grads[x.0] = Some(self.alloc(xv.len()));
            }
            let buf = grads[x.0].as_mut().unwrap();
            unsafe {
                matrixmultiply::dgemm(
                    in_dim,
                    out_dim,
                    rows,
                    1.0,
                    wv.as_ptr(),
                    out_dim as isize,
                    1,
                    g.as_ptr(),
                    1,
                    out_dim as isize,
                    if first { 0.0 } else { 1.0 },
                    buf.as_mut_ptr(),
                    1,
                    in_dim as isize,
                );
            }
        }
        // dW += X^T dY
        self.acc(grads, w, |buf| unsafe {
            matrixmultiply::dgemm(
                in_dim,
                rows,
                out_dim,
                1.0,
                xv.as_ptr(),
                1,
                in_dim as isize,
                g.as_ptr(),
                out_dim as isize,
                1,
                1.0,
                buf.as_mut_ptr(),
                out_dim as isize,
                1,
            );
        });
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

/// Adam hyperparameters. The defaults follow the standard recommendation;
/// training supplies its own learning rate.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// First and second moment estimates mirroring a store's parameter shapes.
pub struct AdamState {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect::<Vec<_>>();
        let v = m.clone();
        Self { t: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update with bias correction over every parameter in the
    /// store, consuming the current gradients. Gradients containing NaN or
    /// infinity abort the step with the parameters untouched.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        if !store.all_grads_finite() {
            return Err(Error::NumericalFault("non-finite gradient in Adam step".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let n = store.value(id).len();
            for j in 0..n {
                let g = store.grad(id)[j];
                let m = &mut self.m[k][j];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                let v = &mut self.v[k][j];
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                store.value_mut(id)[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Compares an analytic gradient against central finite differences.
///
/// `f(x, grad_out)` evaluates the scalar objective at `x`; when `grad_out`
/// is `Some`, it must also fill in the analytic gradient. Returns the
/// maximum over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn check_gradients(
    mut f: impl FnMut(&[f64], Option<&mut [f64]>) -> f64,
    point: &[f64],
    h: f64,
) -> f64 {
    let n = point.len();
    let mut analytic = vec![0.0; n];
    f(point, Some(&mut analytic));
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..n {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x, None);
        x[i] = orig - h;
        let fm = f(&x, None);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
