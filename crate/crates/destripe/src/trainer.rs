//! Unsupervised optimization of the decomposition `P = P_IS + P_SA`.
//!
//! Each iteration evaluates both models on the full pixel grid, sorts the
//! ideal-sinogram prediction per detector column, permutes the stripe
//! prediction with the same index, and minimizes a masked mean absolute
//! error plus the two scheduled smoothness terms with Adam. The sorting
//! permutation and the intensity weights are recomputed every iteration and
//! treated as constants by the gradient.

use std::cell::RefCell;
use std::io::Write;
use std::rc::Rc;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{AdamConfig, AdamState, BufferPool, NodeId, Tape};
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::models::{
    encode_plans_full_grid, init_params, theta_node, phi_node, CoordGrid, Models,
};
use crate::regularizers::{
    angular_indices, detector_indices, is_weights, psi_is_node, psi_sa_node, restrict_weights,
    DiffIndices, RegMode,
};
use crate::sinogram::{
    apply_perm, detect_defective, normalize, sort_columns, DefectMask, NormParams, Sinogram,
};

/// Knobs for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lambda_is_start: f64,
    pub lambda_is_end: f64,
    pub lambda_sa_start: f64,
    pub lambda_sa_end: f64,
    pub kappa: f64,
    pub mu: f64,
    pub reg_mode: RegMode,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            lr: 1e-4,
            lambda_is_start: 1e-4,
            lambda_is_end: 5e-3,
            lambda_sa_start: 1e-4,
            lambda_sa_end: 1e-3,
            kappa: 1.0,
            mu: 1e-6,
            reg_mode: RegMode::BothWeighted,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, start, end) in [
            ("lambda_is", self.lambda_is_start, self.lambda_is_end),
            ("lambda_sa", self.lambda_sa_start, self.lambda_sa_end),
        ] {
            if !(start >= 0.0) || !(end >= start) || !end.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must satisfy 0 <= start <= end, got {start} -> {end}"
                )));
            }
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(Error::Config(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if !(self.mu > 0.0) {
            return Err(Error::Config(format!("mu must be > 0, got {}", self.mu)));
        }
        if self.log_every < 1 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Regularizer weights at one iteration: a linear ramp from the start values
/// at iteration 0 to the end values at 80% of the run, constant afterwards.
pub fn lambda_schedule(iter: usize, config: &TrainConfig) -> (f64, f64) {
    let ramp = (config.iterations * 4) / 5;
    let frac = if ramp == 0 { 1.0 } else { ((iter as f64) / (ramp as f64)).min(1.0) };
    (
        config.lambda_is_start + (config.lambda_is_end - config.lambda_is_start) * frac,
        config.lambda_sa_start + (config.lambda_sa_end - config.lambda_sa_start) * frac,
    )
}

/// One logged iteration of the loss trace.
#[derive(Debug, Clone, Serialize)]
pub struct TrainEntry {
    pub iter: usize,
    pub loss: f64,
    pub data: f64,
    pub psi_is: f64,
    pub psi_sa: f64,
    pub lam_is: f64,
    pub lam_sa: f64,
}

/// Loss trace plus wall-clock time for a run.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub entries: Vec<TrainEntry>,
    pub wall_clock_secs: f64,
}

/// Individual terms of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub data: f64,
    pub psi_is: f64,
    pub psi_sa: f64,
}

/// Everything about the loss that depends only on the input sinogram and
/// mask, precomputed once per run.
pub struct LossContext {
    pub m: usize,
    pub n: usize,
    plans: Vec<Rc<crate::autodiff::BilinearPlan>>,
    r_idx: Rc<Vec<u32>>,
    p_r: Vec<f64>,
    d_idx: DiffIndices,
    a_idx: DiffIndices,
    pool: Rc<RefCell<BufferPool>>,
}

impl LossContext {
    /// `p_norm` is the normalized sinogram the loss fits against.
    pub fn new(p_norm: &Grid2, mask: &DefectMask) -> Result<Self> {
        let (m, n) = (p_norm.rows(), p_norm.cols());
        mask.check_shape(m, n)?;
        let kept = mask.kept_columns();
        if kept.is_empty() {
            return Err(Error::EmptyMask("loss region is empty".into()));
        }
        let coords = CoordGrid::new(m, n)?;
        let specs = crate::models::level_resolutions(m, n);
        let plans = encode_plans_full_grid(&specs, coords);
        let mut r_idx = Vec::with_capacity(m * kept.len());
        let mut p_r = Vec::with_capacity(m * kept.len());
        for i in 0..m {
            for &j in &kept {
                r_idx.push((i * n + j) as u32);
                p_r.push(p_norm.at(i, j));
            }
        }
        Ok(Self {
            m,
            n,
            plans,
            r_idx: Rc::new(r_idx),
            p_r,
            d_idx: detector_indices(m, n, true),
            a_idx: angular_indices(m, n, true),
            pool: BufferPool::shared(),
        })
    }

    pub fn region_size(&self) -> usize {
        self.r_idx.len()
    }
}

/// Per-iteration constants derived from the current ideal-sinogram
/// prediction: the sorting permutation (as flat gather indices) and the
/// detached intensity weights.
#[derive(Debug, Clone)]
pub struct SortState {
    pub perm_gather: Option<Rc<Vec<u32>>>,
    pub is_weights: Option<Vec<f64>>,
}

/// Derives the sort state from raw ideal-sinogram values per the mode:
/// unsorted modes keep the identity permutation, weighted modes compute
/// intensity weights from the (sorted) prediction.
pub fn compute_sort_state(is_values: &[f64], m: usize, n: usize, mode: RegMode) -> Result<SortState> {
    let grid = Grid2::new(m, n, is_values.to_vec())?;
    let (reg_source, perm_gather) = if mode.sorted() {
        let (sorted, perm) = sort_columns(&grid);
        (sorted, Some(Rc::new(perm.gather_indices())))
    } else {
        (grid, None)
    };
    let weights = if mode.uses_is() && mode.weighted() {
        Some(restrict_weights(&is_weights(&reg_source).0, true))
    } else {
        None
    };
    Ok(SortState { perm_gather, is_weights: weights })
}

/// Builds one full loss evaluation on a fresh tape. With `frozen` the given
/// sort state is reused (finite-difference checks need the permutation and
/// weights pinned); otherwise both are recomputed from the current
/// prediction.
pub fn loss_forward(
    models: &Models,
    ctx: &LossContext,
    lambda_is: f64,
    lambda_sa: f64,
    mode: RegMode,
    frozen: Option<&SortState>,
) -> Result<(Tape, NodeId, LossBreakdown)> {
    let mut tape = Tape::with_pool(ctx.pool.clone());
    let is_node = theta_node(models, &mut tape, &ctx.plans)?;
    let phi = phi_node(models, &mut tape);

    let sort = match frozen {
        Some(s) => s.clone(),
        None => {
            let is_values = tape.value(is_node).to_vec();
            compute_sort_state(&is_values, ctx.m, ctx.n, mode)?
        }
    };

    let pred = tape.add(is_node, phi)?;
    let picked = tape.gather(pred, ctx.r_idx.clone())?;
    let target = tape.constant_slice(&ctx.p_r);
    let diff = tape.sub(picked, target)?;
    let absdiff = tape.abs(diff);
    let total_abs = tape.sum(absdiff);
    let data = tape.scale(total_abs, 1.0 / ctx.r_idx.len() as f64);

    let mut loss = data;
    let mut psi_is_val = 0.0;
    let mut psi_sa_val = 0.0;

    if mode.uses_is() {
        let is_reg = match &sort.perm_gather {
            Some(g) => tape.gather(is_node, g.clone())?,
            None => is_node,
        };
        let psi = psi_is_node(&mut tape, is_reg, &ctx.d_idx, sort.is_weights.clone(), false)?;
        psi_is_val = tape.value(psi)[0];
        let weighted = tape.scale(psi, lambda_is);
        loss = tape.add(loss, weighted)?;
    }
    if mode.uses_sa() {
        let sa_reg = match &sort.perm_gather {
            Some(g) => tape.gather(phi, g.clone())?,
            None => phi,
        };
        let psi = psi_sa_node(&mut tape, sa_reg, &ctx.a_idx, false)?;
        psi_sa_val = tape.value(psi)[0];
        let weighted = tape.scale(psi, lambda_sa);
        loss = tape.add(loss, weighted)?;
    }

    let breakdown = LossBreakdown {
        total: tape.value(loss)[0],
        data: tape.value(data)[0],
        psi_is: psi_is_val,
        psi_sa: psi_sa_val,
    };
    Ok((tape, loss, breakdown))
}

/// Reference evaluation of the full loss on plain grids, used as an oracle
/// for the tape version and by callers that only need the number.
pub fn total_loss(
    p: &Grid2,
    mask: &DefectMask,
    is_hat: &Grid2,
    sa_hat: &Grid2,
    lambda_is: f64,
    lambda_sa: f64,
    mode: RegMode,
) -> Result<f64> {
    p.check_same_shape(is_hat, "ideal-sinogram prediction")?;
    p.check_same_shape(sa_hat, "stripe prediction")?;
    mask.check_shape(p.rows(), p.cols())?;
    let kept = mask.kept_columns();
    if kept.is_empty() {
        return Err(Error::EmptyMask("loss region is empty".into()));
    }
    let mut acc = 0.0;
    for i in 0..p.rows() {
        for &j in &kept {
            acc += (is_hat.at(i, j) + sa_hat.at(i, j) - p.at(i, j)).abs();
        }
    }
    let mut loss = acc / (p.rows() * kept.len()) as f64;

    let (is_reg, sa_reg) = if mode.sorted() {
        let (sorted, perm) = sort_columns(is_hat);
        (sorted, apply_perm(sa_hat, &perm)?)
    } else {
        (is_hat.clone(), sa_hat.clone())
    };
    let opts = crate::regularizers::RegOptions::default();
    if mode.uses_is() {
        loss += lambda_is * crate::regularizers::psi_is_grid(&is_reg, mode.weighted(), opts);
    }
    if mode.uses_sa() {
        loss += lambda_sa * crate::regularizers::psi_sa_grid(&sa_reg, opts);
    }
    Ok(loss)
}

/// Result bundle of one training run.
pub struct TrainOutput {
    pub models: Models,
    pub norm: NormParams,
    pub mask: DefectMask,
    pub report: TrainReport,
}

/// Detects defective columns, then trains on the reliable region.
pub fn train(
    p: &Sinogram,
    config: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutput> {
    config.validate()?;
    let mask = detect_defective(p, config.mu)?;
    train_with_mask(p, &mask, config, log)
}

/// Trains against a caller-supplied defect mask. Values in defective columns
/// never influence the result: the normalization range, the data term, and
/// both regularizers read only model outputs or reliable pixels.
pub fn train_with_mask(
    p: &Sinogram,
    mask: &DefectMask,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutput> {
    config.validate()?;
    let started = Instant::now();
    let (p_norm, norm) = normalize(p, mask)?;
    let ctx = LossContext::new(p_norm.grid(), mask)?;
    let mut models = init_params(p.rows(), p.cols(), config.seed)?;
    let adam_cfg = AdamConfig::with_lr(config.lr);
    let mut adam = AdamState::new(&models.store);
    let mut report = TrainReport::default();

    for iter in 0..config.iterations {
        let (lam_is, lam_sa) = lambda_schedule(iter, config);
        let (tape, loss, bd) =
            loss_forward(&models, &ctx, lam_is, lam_sa, config.reg_mode, None)?;

        let should_log = iter % config.log_every == 0 || iter + 1 == config.iterations;
        if should_log || !bd.total.is_finite() {
            let entry = TrainEntry {
                iter,
                loss: bd.total,
                data: bd.data,
                psi_is: bd.psi_is,
                psi_sa: bd.psi_sa,
                lam_is,
                lam_sa,
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&entry)
                    .map_err(|e| Error::Format(format!("log serialization failed: {e}")))?;
                writeln!(w, "{line}")?;
            }
            report.entries.push(entry);
        }
        if !bd.total.is_finite() {
            report.wall_clock_secs = started.elapsed().as_secs_f64();
            return Err(Error::NumericalFault(format!(
                "loss became non-finite at iteration {iter}"
            )));
        }

        tape.backward(loss, &mut models.store)?;
        adam.step(&mut models.store, &adam_cfg)?;
    }

    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutput { models, norm, mask: mask.clone(), report })
}

/// Evaluates the trained ideal-sinogram model on every pixel (defective
/// columns included), denormalizes, and clamps negatives to zero.
pub fn predict_is(models: &Models, norm: &NormParams) -> Result<Sinogram> {
    let coords = CoordGrid::new(models.m, models.n)?;
    let plans = encode_plans_full_grid(&models.grid.specs, coords);
    let mut tape = Tape::new();
    let node = theta_node(models, &mut tape, &plans)?;
    let values = tape.value(node);
    let (lo, span) = (norm.lo, norm.span());
    let grid = Grid2::new(
        models.m,
        models.n,
        values.iter().map(|v| (lo + v * span).max(0.0)).collect(),
    )?;
    Sinogram::new(grid)
}

/// Maps the trained stripe field back to the input scale. Stripes are
/// differences, so only the span applies: the additive offset belongs to the
/// ideal sinogram.
pub fn predict_sa(models: &Models, norm: &NormParams) -> Result<Grid2> {
    let phi = models.store.value(models.stripe.param);
    let span = norm.span();
    Grid2::new(models.m, models.n, phi.iter().map(|v| v * span).collect())
}
