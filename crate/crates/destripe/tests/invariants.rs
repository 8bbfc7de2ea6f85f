//! Property suites for the core invariants: sorting round-trips, the
//! permutation group action, the stripe-regularizer nullspace, partition of
//! unity of the grid encoding, loss invariance to defective-pixel values,
//! and container round-trips.

use proptest::prelude::*;

use destripe::formats::{
    decode_checkpoint, decode_image, decode_mask, decode_sinogram, encode_checkpoint,
    encode_image, encode_mask, encode_sinogram, Checkpoint, CHECKPOINT_VERSION,
};
use destripe::grid::Grid2;
use destripe::models::{encode_plan_for_points, grid_encode, init_params, level_resolutions};
use destripe::regularizers::{psi_sa_grid, RegMode, RegOptions};
use destripe::sinogram::{
    apply_perm, denormalize, normalize, sort_columns, DefectMask, Sinogram,
};
use destripe::trainer::{total_loss, train_with_mask, TrainConfig};

fn grid_from(m: usize, n: usize, data: Vec<f64>) -> Grid2 {
    Grid2::new(m, n, data).unwrap()
}

prop_compose! {
    fn arb_grid(max_m: usize, max_n: usize)
        (m in 2..=max_m, n in 2..=max_n)
        (data in prop::collection::vec(-1e3f64..1e3, m * n),
         m in Just(m), n in Just(n))
        -> Grid2
    {
        grid_from(m, n, data)
    }
}

prop_compose! {
    fn arb_tied_grid(max_m: usize, max_n: usize)
        (m in 2..=max_m, n in 2..=max_n)
        (data in prop::collection::vec(prop::sample::select(vec![-1.0, -0.5, 0.0, 0.5, 1.0]), m * n),
         m in Just(m), n in Just(n))
        -> Grid2
    {
        grid_from(m, n, data)
    }
}

fn any_grid() -> BoxedStrategy<Grid2> {
    prop_oneof![arb_grid(8, 8), arb_tied_grid(8, 8)].boxed()
}

fn columns_ascending(g: &Grid2) -> bool {
    (0..g.cols()).all(|j| (1..g.rows()).all(|i| g.at(i - 1, j) <= g.at(i, j)))
}

fn column_constant(g: &Grid2) -> bool {
    (0..g.cols()).all(|j| (1..g.rows()).all(|i| g.at(i, j) == g.at(0, j)))
}

proptest! {
    #[test]
    fn sorting_round_trips(g in any_grid()) {
        let (sorted, perm) = sort_columns(&g);
        prop_assert!(columns_ascending(&sorted));
        let forward = apply_perm(&g, &perm).unwrap();
        prop_assert_eq!(forward.data(), sorted.data());
        let back = apply_perm(&sorted, &perm.invert()).unwrap();
        prop_assert_eq!(back.data(), g.data());
    }

    #[test]
    fn sorting_is_idempotent(g in any_grid()) {
        let (sorted, _) = sort_columns(&g);
        let (again, _) = sort_columns(&sorted);
        prop_assert_eq!(again.data(), sorted.data());
    }

    #[test]
    fn permutation_group_action(g in any_grid(), extra in prop::collection::vec(-1e3f64..1e3, 64)) {
        let (_, perm) = sort_columns(&g);
        let x = grid_from(g.rows(), g.cols(), extra[..g.len()].to_vec());
        let forward = apply_perm(&x, &perm).unwrap();
        let back = apply_perm(&forward, &perm.invert()).unwrap();
        prop_assert_eq!(back.data(), x.data());
        prop_assert_eq!(perm.invert().invert().gather_indices(), perm.gather_indices());
    }
}

#[test]
fn psi_sa_zero_iff_column_constant_brute_force_4x4() {
    for cyclic in [true, false] {
        let opts = RegOptions { cyclic, ..RegOptions::default() };
        for bits in 0u32..1 << 16 {
            let data: Vec<f64> = (0..16).map(|k| ((bits >> k) & 1) as f64).collect();
            let g = grid_from(4, 4, data);
            let psi = psi_sa_grid(&g, opts);
            assert_eq!(psi == 0.0, column_constant(&g), "bits {bits:#06x} cyclic {cyclic}");
            assert!(psi >= 0.0);
        }
    }
}

proptest! {
    #[test]
    fn psi_sa_zero_iff_column_constant(
        (m, n) in (2usize..=8, 1usize..=8),
        base in prop::collection::vec(-100.0f64..100.0, 8),
        perturb in prop::option::of((0usize..8, 0usize..8, prop_oneof![0.1f64..10.0, -10.0f64..-0.1])),
        cyclic in any::<bool>(),
    ) {
        let mut g = Grid2::from_fn(m, n, |_, j| base[j]);
        let expect_constant = perturb.is_none();
        if let Some((i, j, delta)) = perturb {
            g.set(i % m, j % n, base[j % n] + delta);
        }
        let opts = RegOptions { cyclic, ..RegOptions::default() };
        prop_assert_eq!(psi_sa_grid(&g, opts) == 0.0, expect_constant);
    }

    #[test]
    fn grid_encoding_weights_are_a_partition_of_unity(
        (m, n) in (2usize..=64, 2usize..=64),
        points in prop::collection::vec((-1.0f64..=1.0, -1.0f64..=1.0), 1..32),
    ) {
        let specs = level_resolutions(m, n);
        for plan in encode_plan_for_points(&specs, &points) {
            for (ws, idx) in plan.w.iter().zip(&plan.idx) {
                let sum: f64 = ws.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12, "weights sum to {sum}");
                for (&w, &v) in ws.iter().zip(idx) {
                    prop_assert!(w >= 0.0);
                    prop_assert!((v as usize) < plan.n_vertices);
                }
            }
        }
    }

    #[test]
    fn constant_grid_level_encodes_to_the_constant(
        seed in 0u64..1000,
        x in -1.0f64..=1.0,
        y in -1.0f64..=1.0,
        c in -10.0f64..10.0,
        level in 0usize..3,
    ) {
        let mut models = init_params(16, 24, seed).unwrap();
        let id = models.grid.params[level];
        for v in models.store.value_mut(id) {
            *v = c;
        }
        let feats = grid_encode(&models, x, y);
        prop_assert!((feats[2 * level] - c).abs() < 1e-12);
        prop_assert!((feats[2 * level + 1] - c).abs() < 1e-12);
    }
}

prop_compose! {
    fn arb_loss_case()
        (m in 2usize..=6, n in 2usize..=6)
        (p in prop::collection::vec(0.0f64..10.0, m * n),
         is_hat in prop::collection::vec(0.0f64..10.0, m * n),
         sa_hat in prop::collection::vec(-1.0f64..1.0, m * n),
         garbage in prop::collection::vec(-1e6f64..1e6, m * n),
         keep in prop::collection::vec(any::<bool>(), n),
         mode in prop::sample::select(vec![
             RegMode::SaOnly,
             RegMode::IsOnly,
             RegMode::Both,
             RegMode::BothWeighted,
             RegMode::BothUnsorted,
         ]),
         m in Just(m), n in Just(n))
        -> (Grid2, Grid2, Grid2, Vec<f64>, Vec<bool>, RegMode)
    {
        let mut keep = keep;
        keep[0] = true;
        (grid_from(m, n, p), grid_from(m, n, is_hat), grid_from(m, n, sa_hat), garbage, keep, mode)
    }
}

proptest! {
    #[test]
    fn loss_ignores_defective_pixel_values(
        (p, is_hat, sa_hat, garbage, keep, mode) in arb_loss_case(),
    ) {
        let mask = DefectMask::new(p.rows(), keep.clone()).unwrap();
        let reference = total_loss(&p, &mask, &is_hat, &sa_hat, 0.7, 0.3, mode).unwrap();

        let mut tampered = p.clone();
        for j in 0..p.cols() {
            if !mask.is_kept(j) {
                for i in 0..p.rows() {
                    tampered.set(i, j, garbage[i * p.cols() + j]);
                }
            }
        }
        let after = total_loss(&tampered, &mask, &is_hat, &sa_hat, 0.7, 0.3, mode).unwrap();
        prop_assert_eq!(reference.to_bits(), after.to_bits());
    }

    #[test]
    fn normalization_round_trips(g in arb_grid(8, 8), keep in prop::collection::vec(any::<bool>(), 8)) {
        let mut keep = keep[..g.cols()].to_vec();
        keep[0] = true;
        let p = Sinogram::new(g.clone()).unwrap();
        let mask = DefectMask::new(g.rows(), keep).unwrap();
        let Ok((q, params)) = normalize(&p, &mask) else {
            return Ok(());
        };
        let mut kept = Vec::new();
        for j in (0..g.cols()).filter(|&j| mask.is_kept(j)) {
            for i in 0..g.rows() {
                kept.push(q.grid().at(i, j));
            }
        }
        let lo = kept.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = kept.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(lo, 0.0);
        prop_assert_eq!(hi, 1.0);

        let back = denormalize(&q, &params).unwrap();
        for (a, b) in back.grid().data().iter().zip(g.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn training_ignores_defective_pixel_values() {
    let m = 12;
    let n = 10;
    let p = Grid2::from_fn(m, n, |i, j| {
        1.0 + (i as f64 / m as f64 * std::f64::consts::PI).sin() + 0.05 * (j % 3) as f64
    });
    let mut tampered = p.clone();
    for j in [3, 4] {
        for i in 0..m {
            tampered.set(i, j, if i % 2 == 0 { 1e6 } else { -7e3 });
        }
    }
    let keep: Vec<bool> = (0..n).map(|j| j != 3 && j != 4).collect();
    let mask = DefectMask::new(m, keep).unwrap();
    let config = TrainConfig { iterations: 3, seed: 42, log_every: 1, ..TrainConfig::default() };

    let a = train_with_mask(&Sinogram::new(p).unwrap(), &mask, &config, None).unwrap();
    let b = train_with_mask(&Sinogram::new(tampered).unwrap(), &mask, &config, None).unwrap();
    assert_eq!(a.models.store.flatten(), b.models.store.flatten());
    assert_eq!(a.norm.lo.to_bits(), b.norm.lo.to_bits());
    for (x, y) in a.report.entries.iter().zip(&b.report.entries) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
    }
}

prop_compose! {
    fn arb_sections()
        (names in prop::collection::btree_set("[a-z]{1,8}", 0..5))
        (values in prop::collection::vec(
            prop::collection::vec(-1e12f64..1e12, 0..24),
            names.len(),
        ), names in Just(names))
        -> Vec<(String, Vec<f64>)>
    {
        names.into_iter().zip(values).collect()
    }
}

proptest! {
    #[test]
    fn sinogram_format_round_trips(g in arb_grid(8, 8)) {
        let s = Sinogram::new(g).unwrap();
        let decoded = decode_sinogram(&encode_sinogram(&s)).unwrap();
        for (d, v) in decoded.grid().data().iter().zip(s.grid().data()) {
            prop_assert_eq!(d.to_bits(), ((*v as f32) as f64).to_bits());
        }
        prop_assert_eq!(decoded.rows(), s.rows());
        let twice = decode_sinogram(&encode_sinogram(&decoded)).unwrap();
        prop_assert_eq!(twice.grid().data(), decoded.grid().data());
    }

    #[test]
    fn image_format_round_trips(g in arb_grid(8, 8)) {
        let decoded = decode_image(&encode_image(&g)).unwrap();
        for (d, v) in decoded.data().iter().zip(g.data()) {
            prop_assert_eq!(d.to_bits(), ((*v as f32) as f64).to_bits());
        }
        prop_assert_eq!(decoded.cols(), g.cols());
        let twice = decode_image(&encode_image(&decoded)).unwrap();
        prop_assert_eq!(twice.data(), decoded.data());
    }

    #[test]
    fn mask_format_round_trips(
        m in 2usize..=40,
        keep in prop::collection::vec(any::<bool>(), 1..40),
    ) {
        let mut keep = keep;
        keep[0] = true;
        let mask = DefectMask::new(m, keep).unwrap();
        let decoded = decode_mask(&encode_mask(&mask)).unwrap();
        prop_assert_eq!(decoded.keep_flags(), mask.keep_flags());
        prop_assert_eq!(decoded.n_angles(), mask.n_angles());
    }

    #[test]
    fn checkpoint_format_round_trips(sections in arb_sections()) {
        let c = Checkpoint { version: CHECKPOINT_VERSION, sections };
        let decoded = decode_checkpoint(&encode_checkpoint(&c)).unwrap();
        prop_assert_eq!(decoded, c);
    }
}
