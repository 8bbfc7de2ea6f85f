//! The two trainable models: `F_Theta`, an implicit neural representation
//! (three-level feature grid plus a small MLP) mapping normalized pixel
//! coordinates to ideal-sinogram values, and `F_Phi`, a learnable per-pixel
//! stripe field.
//!
//! Coordinates use pixel centers: row `i` of `M` maps to
//! `x_i = -1 + 2i/(M-1)` and column `j` of `N` to `y_j = -1 + 2j/(N-1)`, so
//! corner pixels land exactly on the corners of `[-1, 1]^2`.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{BilinearPlan, NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::formats::Checkpoint;

/// Grid initialization range, plus-minus, for feature grids and the stripe
/// field.
pub const INIT_RANGE: f64 = 1e-4;

/// MLP layer shapes: input is the 6 concatenated grid features, three hidden
/// ReLU layers of 64 units, linear scalar output.
pub const MLP_DIMS: [(usize, usize); 4] = [(6, 64), (64, 64), (64, 64), (64, 1)];

/// Number of feature grid levels and features stored per vertex.
pub const N_LEVELS: usize = 3;
pub const FEATURES_PER_VERTEX: usize = 2;

/// Vertex resolution of one grid level along the angle and detector axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub res_a: usize,
    pub res_d: usize,
}

impl LevelSpec {
    pub fn n_vertices(&self) -> usize {
        self.res_a * self.res_d
    }
}

/// Level resolutions linearly spaced from ceil(M/4) to ceil(M/2) along the
/// angle axis (same pattern with N on the detector axis).
pub fn level_resolutions(m: usize, n: usize) -> [LevelSpec; N_LEVELS] {
    let res = |d: usize, num: usize, den: usize| (d * num).div_ceil(den);
    [
        LevelSpec { res_a: res(m, 1, 4), res_d: res(n, 1, 4) },
        LevelSpec { res_a: res(m, 3, 8), res_d: res(n, 3, 8) },
        LevelSpec { res_a: res(m, 1, 2), res_d: res(n, 1, 2) },
    ]
}

/// Pixel-center coordinate grid over an `M x N` sinogram.
#[derive(Debug, Clone, Copy)]
pub struct CoordGrid {
    pub m: usize,
    pub n: usize,
}

impl CoordGrid {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m < 2 || n < 2 {
            return Err(Error::InvalidShape(format!("coordinate grid needs 2x2, got {m}x{n}")));
        }
        Ok(Self { m, n })
    }

    /// Coordinates of pixel (row, col), each in [-1, 1].
    pub fn coord(&self, i: usize, j: usize) -> (f64, f64) {
        (
            -1.0 + 2.0 * i as f64 / (self.m - 1) as f64,
            -1.0 + 2.0 * j as f64 / (self.n - 1) as f64,
        )
    }
}

/// Three feature-grid levels; each vertex stores two learnable features.
#[derive(Debug, Clone)]
pub struct MultiResGrid {
    pub specs: [LevelSpec; N_LEVELS],
    pub params: [ParamId; N_LEVELS],
}

/// Three hidden ReLU layers of 64 units and a linear scalar head.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: [(ParamId, ParamId); 4],
}

/// Learnable stripe matrix with the sinogram's shape.
#[derive(Debug, Clone)]
pub struct StripeField {
    pub m: usize,
    pub n: usize,
    pub param: ParamId,
}

/// Both models plus the parameter store that owns their weights.
pub struct Models {
    pub m: usize,
    pub n: usize,
    pub store: ParamStore,
    pub grid: MultiResGrid,
    pub mlp: Mlp,
    pub stripe: StripeField,
}

/// Initializes both models for an `M x N` sinogram from a seeded generator:
/// grid features and stripe entries uniform in (-1e-4, 1e-4), MLP weights
/// Kaiming-uniform with bound sqrt(6 / fan_in), biases zero. Draw order is
/// fixed (grid levels, then MLP layers, then stripe) so equal seeds yield
/// bit-identical parameters.
pub fn init_params(m: usize, n: usize, seed: u64) -> Result<Models> {
    CoordGrid::new(m, n)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();

    let specs = level_resolutions(m, n);
    let mut grid_params = Vec::with_capacity(N_LEVELS);
    for (l, spec) in specs.iter().enumerate() {
        let count = spec.n_vertices() * FEATURES_PER_VERTEX;
        let values: Vec<f64> = (0..count).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
        grid_params.push(store.register(format!("grid.l{l}"), values)?);
    }

    let mut layers = Vec::with_capacity(MLP_DIMS.len());
    for (l, &(fan_in, fan_out)) in MLP_DIMS.iter().enumerate() {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        let wid = store.register(format!("mlp.w{l}"), w)?;
        let bid = store.register(format!("mlp.b{l}"), vec![0.0; fan_out])?;
        layers.push((wid, bid));
    }

    let stripe_values: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
    let stripe_param = store.register("stripe", stripe_values)?;

    Ok(Models {
        m,
        n,
        store,
        grid: MultiResGrid {
            specs,
            params: [grid_params[0], grid_params[1], grid_params[2]],
        },
        mlp: Mlp { layers: [layers[0], layers[1], layers[2], layers[3]] },
        stripe: StripeField { m, n, param: stripe_param },
    })
}

impl Models {
    /// Total scalar parameter count: grid vertices x features per level,
    /// plus MLP weights and biases, plus the stripe matrix.
    pub fn param_count(&self) -> usize {
        self.store.n_scalars()
    }

    pub fn expected_param_count(&self) -> usize {
        let grid: usize =
            self.grid.specs.iter().map(|s| s.n_vertices() * FEATURES_PER_VERTEX).sum();
        let mlp: usize = MLP_DIMS.iter().map(|&(i, o)| i * o + o).sum();
        grid + mlp + self.m * self.n
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.store.to_checkpoint()
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.store.load_checkpoint(ckpt)
    }
}

/// One level's interpolation cell for a query point: base vertex indices and
/// fractional offsets, with coordinates clamped into [-1, 1].
fn cell(coord: f64, res: usize) -> (usize, usize, f64) {
    if res < 2 {
        return (0, 0, 0.0);
    }
    let t = (coord.clamp(-1.0, 1.0) + 1.0) / 2.0 * (res - 1) as f64;
    let i0 = (t.floor() as usize).min(res - 2);
    (i0, i0 + 1, t - i0 as f64)
}

/// Builds one interpolation plan per level for an arbitrary list of query
/// points (vertex layout: `va * res_d + vd`, features interleaved).
pub fn encode_plan_for_points(
    specs: &[LevelSpec; N_LEVELS],
    points: &[(f64, f64)],
) -> Vec<BilinearPlan> {
    specs
        .iter()
        .map(|spec| {
            let mut idx = Vec::with_capacity(points.len());
            let mut w = Vec::with_capacity(points.len());
            for &(x, y) in points {
                let (a0, a1, fa) = cell(x, spec.res_a);
                let (d0, d1, fd) = cell(y, spec.res_d);
                let rd = spec.res_d as u32;
                idx.push([
                    a0 as u32 * rd + d0 as u32,
                    a0 as u32 * rd + d1 as u32,
                    a1 as u32 * rd + d0 as u32,
                    a1 as u32 * rd + d1 as u32,
                ]);
                w.push([
                    (1.0 - fa) * (1.0 - fd),
                    (1.0 - fa) * fd,
                    fa * (1.0 - fd),
                    fa * fd,
                ]);
            }
            BilinearPlan {
                n_vertices: spec.n_vertices(),
                features: FEATURES_PER_VERTEX,
                idx,
                w,
            }
        })
        .collect()
}

/// Plans covering every pixel of an `M x N` grid in row-major order.
pub fn encode_plans_full_grid(
    specs: &[LevelSpec; N_LEVELS],
    coords: CoordGrid,
) -> Vec<Rc<BilinearPlan>> {
    let mut points = Vec::with_capacity(coords.m * coords.n);
    for i in 0..coords.m {
        for j in 0..coords.n {
            points.push(coords.coord(i, j));
        }
    }
    encode_plan_for_points(specs, &points).into_iter().map(Rc::new).collect()
}

/// Interpolated features at one query point, concatenated in level order.
pub fn grid_encode(models: &Models, x: f64, y: f64) -> [f64; 6] {
    let plans = encode_plan_for_points(&models.grid.specs, &[(x, y)]);
    let mut out = [0.0; 6];
    for (l, plan) in plans.iter().enumerate() {
        let grid = models.store.value(models.grid.params[l]);
        for c in 0..FEATURES_PER_VERTEX {
            let mut acc = 0.0;
            for t in 0..4 {
                acc += plan.w[0][t] * grid[plan.idx[0][t] as usize * FEATURES_PER_VERTEX + c];
            }
            out[l * FEATURES_PER_VERTEX + c] = acc;
        }
    }
    out
}

/// Scalar INR evaluation at one coordinate: `mlp(grid_encode(x))`.
pub fn theta_forward(models: &Models, x: f64, y: f64) -> f64 {
    let feats = grid_encode(models, x, y);
    let mut h: Vec<f64> = feats.to_vec();
    for (l, &(fan_in, fan_out)) in MLP_DIMS.iter().enumerate() {
        let (wid, bid) = models.mlp.layers[l];
        let w = models.store.value(wid);
        let b = models.store.value(bid);
        let mut next = vec![0.0; fan_out];
        for (o, out) in next.iter_mut().enumerate() {
            let mut acc = b[o];
            for i in 0..fan_in {
                acc += h[i] * w[i * fan_out + o];
            }
            *out = if l + 1 < MLP_DIMS.len() { acc.max(0.0) } else { acc };
        }
        h = next;
    }
    h[0]
}

/// Stripe field lookup at pixel (i, j).
pub fn phi_forward(models: &Models, i: usize, j: usize) -> Result<f64> {
    if i >= models.stripe.m || j >= models.stripe.n {
        return Err(Error::Index(format!(
            "stripe index ({i}, {j}) outside {}x{}",
            models.stripe.m, models.stripe.n
        )));
    }
    Ok(models.store.value(models.stripe.param)[i * models.stripe.n + j])
}

/// Tape node evaluating the INR on every point of the prebuilt plans
/// (row-major pixel order when the plans come from
/// [`encode_plans_full_grid`]). Output length equals the plan's point count.
pub fn theta_node(
    models: &Models,
    tape: &mut Tape,
    plans: &[Rc<BilinearPlan>],
) -> Result<NodeId> {
    let rows = plans[0].idx.len();
    let mut encoded = Vec::with_capacity(N_LEVELS);
    for (l, plan) in plans.iter().enumerate() {
        let grid = tape.param(&models.store, models.grid.params[l]);
        encoded.push(tape.bilinear(grid, plan.clone())?);
    }
    let mut h = tape.concat_cols(&encoded, rows)?;
    for (l, &(fan_in, fan_out)) in MLP_DIMS.iter().enumerate() {
        let (wid, bid) = models.mlp.layers[l];
        let w = tape.param(&models.store, wid);
        let b = tape.param(&models.store, bid);
        let relu = l + 1 < MLP_DIMS.len();
        h = tape.linear(h, w, b, fan_in, fan_out, relu)?;
    }
    Ok(h)
}

/// Tape leaf holding the entire stripe field, row-major.
pub fn phi_node(models: &Models, tape: &mut Tape) -> NodeId {
    tape.param(&models.store, models.stripe.param)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_resolution_schedule() {
        let specs = level_resolutions(360, 512);
        assert_eq!(specs[0], LevelSpec { res_a: 90, res_d: 128 });
        assert_eq!(specs[1], LevelSpec { res_a: 135, res_d: 192 });
        assert_eq!(specs[2], LevelSpec { res_a: 180, res_d: 256 });
        let small = level_resolutions(8, 8);
        assert_eq!(small[0], LevelSpec { res_a: 2, res_d: 2 });
        assert_eq!(small[1], LevelSpec { res_a: 3, res_d: 3 });
        assert_eq!(small[2], LevelSpec { res_a: 4, res_d: 4 });
    }

    #[test]
    fn coord_grid_corners_hit_unit_square() {
        let c = CoordGrid::new(5, 9).unwrap();
        assert_eq!(c.coord(0, 0), (-1.0, -1.0));
        assert_eq!(c.coord(4, 8), (1.0, 1.0));
        assert_eq!(c.coord(2, 4), (0.0, 0.0));
        assert!(CoordGrid::new(1, 5).is_err());
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let a = init_params(8, 8, 7).unwrap();
        let b = init_params(8, 8, 7).unwrap();
        assert_eq!(a.store.flatten(), b.store.flatten());

        let c = init_params(8, 8, 8).unwrap();
        assert_ne!(a.store.flatten(), c.store.flatten());

        for l in 0..N_LEVELS {
            assert!(a.store.value(a.grid.params[l]).iter().all(|v| v.abs() <= INIT_RANGE));
        }
        assert!(a.store.value(a.stripe.param).iter().all(|v| v.abs() <= INIT_RANGE));
        for (l, &(fan_in, _)) in MLP_DIMS.iter().enumerate() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let (wid, bid) = a.mlp.layers[l];
            assert!(a.store.value(wid).iter().all(|v| v.abs() <= bound));
            assert!(a.store.value(bid).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn param_count_matches_formula() {
        let m = init_params(8, 8, 0).unwrap();
        // Grids: 2*(2*2 + 3*3 + 4*4) = 58; MLP: 448 + 4160 + 4160 + 65 = 8833;
        // stripe: 64.
        assert_eq!(m.expected_param_count(), 58 + 8833 + 64);
        assert_eq!(m.param_count(), m.expected_param_count());
    }

    #[test]
    fn encode_at_corner_returns_vertex_features() {
        let mut m = init_params(8, 8, 3).unwrap();
        // Corner (-1, -1) is vertex (0, 0) of every level.
        let mut expect = [0.0; 6];
        for l in 0..N_LEVELS {
            let grid = m.store.value_mut(m.grid.params[l]);
            grid[0] = 0.5 + l as f64;
            grid[1] = -0.25 - l as f64;
            expect[l * 2] = grid[0];
            expect[l * 2 + 1] = grid[1];
        }
        let got = grid_encode(&m, -1.0, -1.0);
        assert_eq!(got, expect);
    }

    #[test]
    fn encode_at_midpoint_averages_adjacent_vertices() {
        let mut m = init_params(8, 8, 3).unwrap();
        // Zero all levels, then give level 0 (2x2 vertices) distinct values
        // on vertices (0,0) and (0,1); the query (-1, 0) sits halfway
        // between them.
        for l in 0..N_LEVELS {
            m.store.value_mut(m.grid.params[l]).fill(0.0);
        }
        let g0 = m.store.value_mut(m.grid.params[0]);
        g0[0] = 2.0; // vertex (0,0), feature 0
        g0[1] = -4.0; // vertex (0,0), feature 1
        g0[2] = 6.0; // vertex (0,1), feature 0
        g0[3] = 10.0; // vertex (0,1), feature 1
        let got = grid_encode(&m, -1.0, 0.0);
        assert_eq!(got, [4.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_constant_features_everywhere() {
        let mut m = init_params(9, 7, 1).unwrap();
        for l in 0..N_LEVELS {
            m.store.value_mut(m.grid.params[l]).fill(1.375);
        }
        for &(x, y) in &[(0.0, 0.0), (-1.0, 1.0), (0.3, -0.7), (2.0, -3.0), (0.123, 0.456)] {
            let got = grid_encode(&m, x, y);
            for v in got {
                assert!((v - 1.375).abs() < 1e-12, "({x}, {y}) -> {v}");
            }
        }
    }

    #[test]
    fn plan_weights_are_partition_of_unity() {
        let specs = level_resolutions(11, 13);
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|k| {
                let t = k as f64 / 39.0;
                (-1.0 + 2.0 * t, 1.0 - 2.0 * t * t)
            })
            .collect();
        for plan in encode_plan_for_points(&specs, &pts) {
            for w in &plan.w {
                let s: f64 = w.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_everywhere() {
        let mut m = init_params(8, 8, 11).unwrap();
        let (w3, b3) = m.mlp.layers[3];
        m.store.value_mut(w3).fill(0.0);
        m.store.value_mut(b3).fill(0.0);
        for &(x, y) in &[(-1.0, -1.0), (0.0, 0.5), (1.0, 1.0), (0.2, -0.9)] {
            assert_eq!(theta_forward(&m, x, y), 0.0);
        }
    }

    #[test]
    fn theta_is_continuous() {
        let m = init_params(16, 16, 5).unwrap();
        let d = 1e-6;
        for &(x, y) in &[(0.0, 0.0), (-0.5, 0.25), (0.9, -0.9)] {
            let f0 = theta_forward(&m, x, y);
            let f1 = theta_forward(&m, x + d, y + d);
            assert!((f0 - f1).abs() < 1e-3);
        }
    }

    #[test]
    fn theta_batch_matches_scalar_path() {
        let m = init_params(8, 10, 21).unwrap();
        let coords = CoordGrid::new(8, 10).unwrap();
        let plans = encode_plans_full_grid(&m.grid.specs, coords);
        let mut tape = Tape::new();
        let node = theta_node(&m, &mut tape, &plans).unwrap();
        let batch = tape.value(node);
        for i in 0..8 {
            for j in 0..10 {
                let (x, y) = coords.coord(i, j);
                let scalar = theta_forward(&m, x, y);
                let b = batch[i * 10 + j];
                assert!((scalar - b).abs() < 1e-12, "({i},{j}): {scalar} vs {b}");
            }
        }
    }

    #[test]
    fn theta_is_order_invariant() {
        let m = init_params(6, 6, 2).unwrap();
        let coords = CoordGrid::new(6, 6).unwrap();
        let mut row_wise = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                let (x, y) = coords.coord(i, j);
                row_wise.push(theta_forward(&m, x, y));
            }
        }
        let mut col_wise = vec![0.0; 36];
        for j in 0..6 {
            for i in 0..6 {
                let (x, y) = coords.coord(i, j);
                col_wise[i * 6 + j] = theta_forward(&m, x, y);
            }
        }
        assert_eq!(row_wise, col_wise);
    }

    #[test]
    fn theta_gradients_match_finite_differences() {
        let eval = |vals: &[f64], grad_out: Option<&mut [f64]>| -> f64 {
            let mut m = init_params(8, 8, 9).unwrap();
            m.store.load_flat(vals).unwrap();
            let plans = encode_plan_for_points(&m.grid.specs, &[(0.3, -0.4)])
                .into_iter()
                .map(Rc::new)
                .collect::<Vec<_>>();
            let mut tape = Tape::new();
            let node = theta_node(&m, &mut tape, &plans).unwrap();
            let out = tape.value(node)[0];
            if let Some(g) = grad_out {
                tape.backward(node, &mut m.store).unwrap();
                g.copy_from_slice(&m.store.flatten_grads());
            }
            out
        };
        // Moderately sized random-ish parameters keep the MLP active.
        let base = init_params(8, 8, 9).unwrap();
        let point: Vec<f64> = base
            .store
            .flatten()
            .iter()
            .enumerate()
            .map(|(k, v)| v + 0.01 * ((k % 17) as f64 - 8.0) / 8.0)
            .collect();
        let err = check_gradients_subset(eval, &point, 1e-6, 97);
        assert!(err < 1e-5, "relative error {err}");
    }

    /// Finite-difference check over a strided subset of coordinates; the
    /// full parameter vector has ~9000 entries and checking each would
    /// dominate test time without adding coverage.
    fn check_gradients_subset(
        mut f: impl FnMut(&[f64], Option<&mut [f64]>) -> f64,
        point: &[f64],
        h: f64,
        stride: usize,
    ) -> f64 {
        let n = point.len();
        let mut analytic = vec![0.0; n];
        f(point, Some(&mut analytic));
        let mut x = point.to_vec();
        let mut worst = 0.0f64;
        let mut k = 0;
        while k < n {
            let orig = x[k];
            x[k] = orig + h;
            let fp = f(&x, None);
            x[k] = orig - h;
            let fm = f(&x, None);
            x[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(1.0);
            worst = worst.max(err);
            k += stride;
        }
        worst
    }

    #[test]
    fn phi_lookup_and_bounds() {
        let mut m = init_params(4, 5, 13).unwrap();
        assert!(phi_forward(&m, 0, 0).unwrap().abs() <= INIT_RANGE);
        m.store.value_mut(m.stripe.param)[2 * 5 + 3] = 0.75;
        assert_eq!(phi_forward(&m, 2, 3).unwrap(), 0.75);
        assert!(matches!(phi_forward(&m, 4, 0), Err(Error::Index(_))));
        assert!(matches!(phi_forward(&m, 0, 5), Err(Error::Index(_))));
    }

    #[test]
    fn phi_sum_gradient_is_one_per_touched_entry() {
        let mut m = init_params(3, 3, 17).unwrap();
        let mut tape = Tape::new();
        let phi = phi_node(&m, &mut tape);
        let idx = Rc::new(vec![0u32, 4, 8]);
        let picked = tape.gather(phi, idx).unwrap();
        let root = tape.sum(picked);
        tape.backward(root, &mut m.store).unwrap();
        let g = m.store.grad(m.stripe.param);
        for (k, &gv) in g.iter().enumerate() {
            let expect = if k % 4 == 0 { 1.0 } else { 0.0 };
            assert_eq!(gv, expect, "entry {k}");
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let m = init_params(8, 8, 23).unwrap();
        let ckpt = m.to_checkpoint();
        let mut fresh = init_params(8, 8, 99).unwrap();
        fresh.load_checkpoint(&ckpt).unwrap();
        for &(x, y) in &[(0.0, 0.0), (-0.7, 0.7)] {
            assert_eq!(theta_forward(&m, x, y), theta_forward(&fresh, x, y));
        }
    }
}
