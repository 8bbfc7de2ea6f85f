//! Command-line front end wiring the library pipeline: simulate a fan-beam
//! scan, detect dead columns, run the unsupervised correction, apply the
//! sorted-median baseline, reconstruct, score, and export for display.
//!
//! Every run prints one effective-config JSON line (all defaults
//! materialized) on standard error before doing any work; results are
//! line-oriented JSON on standard output. Exit codes: 0 success, 1 usage
//! error, 2 data or format error, 3 numerical fault.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use destripe::ctsim::{
    corrupt, fbp_fan, make_phantom, project_fan, sorted_median_baseline, CorruptionSpec,
    FanBeamGeometry,
};
use destripe::error::{Error, Result};
use destripe::formats::{
    encode_pgm16, read_any_grid, read_mask, read_sinogram, write_checkpoint, write_image,
    write_mask, write_sinogram,
};
use destripe::metrics::{mse, psnr, ssim};
use destripe::regularizers::RegMode;
use destripe::residual::{center_angular, compensate, residual};
use destripe::sinogram::detect_defective;
use destripe::trainer::{predict_is, predict_sa, train_with_mask, TrainConfig};

/// Parses `argv`, runs the selected command, and returns the process exit
/// code. Usage problems exit 1, data and format problems exit 2, numerical
/// faults exit 3.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::NumericalFault(_) => 3,
        _ => 2,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Correct(args) => cmd_correct(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Fbp(args) => cmd_fbp(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::ExportPgm(args) => cmd_export_pgm(args),
    }
}

#[derive(Parser)]
#[command(
    name = "destripe",
    version,
    about = "Sinogram-domain ring artifact removal and fan-beam CT simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a fan-beam scan of a phantom and corrupt it with stripes
    Simulate(SimulateArgs),
    /// Flag defective detector columns in a sinogram
    Detect(DetectArgs),
    /// Remove stripe artifacts by unsupervised decomposition
    Correct(CorrectArgs),
    /// Remove stripe artifacts with the classical sorted-median filter
    Baseline(BaselineArgs),
    /// Reconstruct an image by filtered back-projection
    Fbp(FbpArgs),
    /// Score an image or sinogram against a reference
    Metrics(MetricsArgs),
    /// Render a grid file to a 16-bit PGM with a linear display window
    ExportPgm(ExportPgmArgs),
}

/// Scanner geometry selection shared by `simulate` and `fbp`: the full-scale
/// reference scanner by default, `--desk` for the reduced preset, `--geometry`
/// to load a JSON file, and per-field overrides applied on top.
#[derive(Args)]
struct GeomArgs {
    /// Use the reduced desk-scale geometry preset
    #[arg(long)]
    desk: bool,
    /// Read the geometry from a JSON file instead of a preset
    #[arg(long, value_name = "FILE", conflicts_with = "desk")]
    geometry: Option<PathBuf>,
    /// Source-to-detector distance in mm
    #[arg(long, value_name = "MM")]
    sdd: Option<f64>,
    /// Source-to-rotation-center distance in mm
    #[arg(long, value_name = "MM")]
    sod: Option<f64>,
    /// Number of detector bins
    #[arg(long, value_name = "N")]
    n_det: Option<usize>,
    /// Detector bin pitch in mm
    #[arg(long, value_name = "MM")]
    pitch: Option<f64>,
    /// Number of projection views over the full rotation
    #[arg(long, value_name = "N")]
    n_views: Option<usize>,
    /// Starting view angle in radians
    #[arg(long, value_name = "RAD")]
    angle0: Option<f64>,
}

impl GeomArgs {
    fn resolve(&self) -> Result<FanBeamGeometry> {
        let mut g = if let Some(path) = &self.geometry {
            FanBeamGeometry::from_json(&fs::read_to_string(path)?)?
        } else if self.desk {
            FanBeamGeometry::desk_scale()
        } else {
            FanBeamGeometry::full_scale()
        };
        if let Some(v) = self.sdd {
            g.sdd_mm = v;
        }
        if let Some(v) = self.sod {
            g.sod_mm = v;
        }
        if let Some(v) = self.n_det {
            g.n_det = v;
        }
        if let Some(v) = self.pitch {
            g.pitch_mm = v;
        }
        if let Some(v) = self.n_views {
            g.n_views = v;
        }
        if let Some(v) = self.angle0 {
            g.angle0 = v;
        }
        g.validate()?;
        Ok(g)
    }
}

fn geometry_json(g: &FanBeamGeometry) -> serde_json::Value {
    json!({
        "sdd_mm": g.sdd_mm,
        "sod_mm": g.sod_mm,
        "n_det": g.n_det,
        "pitch_mm": g.pitch_mm,
        "n_views": g.n_views,
        "angle0": g.angle0,
    })
}

/// Replaces non-finite floats with the strings "inf"/"-inf"/"nan" so result
/// lines stay valid JSON.
fn num_or_inf(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn log_config(value: &serde_json::Value) {
    eprintln!("{value}");
}

fn emit(value: &serde_json::Value) {
    println!("{value}");
}

#[derive(Args)]
struct SimulateArgs {
    /// Output path for the clean sinogram
    #[arg(long, value_name = "FILE")]
    out_clean: PathBuf,
    /// Output path for the corrupted sinogram
    #[arg(long, value_name = "FILE")]
    out_corrupt: PathBuf,
    /// Optional output path for the scanner geometry JSON
    #[arg(long, value_name = "FILE")]
    out_geometry: Option<PathBuf>,
    /// Optional output path for the full corruption record JSON
    #[arg(long, value_name = "FILE")]
    out_record: Option<PathBuf>,
    /// Optional output path for the rasterized phantom image
    #[arg(long, value_name = "FILE")]
    out_phantom: Option<PathBuf>,
    /// Phantom name
    #[arg(long, default_value = "shepp-logan")]
    phantom: String,
    /// Raster size in pixels for --out-phantom
    #[arg(long, value_name = "N", default_value_t = 256)]
    raster: usize,
    /// Seed for gain placement and noise
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of detector columns given a gain error
    #[arg(long, value_name = "F")]
    gain_fraction: Option<f64>,
    /// Half-width of the uniform gain perturbation around 1
    #[arg(long, value_name = "A")]
    gain_amplitude: Option<f64>,
    /// First dead detector column
    #[arg(long, value_name = "COL")]
    dead_start: Option<usize>,
    /// Number of consecutive dead columns
    #[arg(long, value_name = "N")]
    dead_count: Option<usize>,
    /// Unattenuated photon count per ray
    #[arg(long, value_name = "I0")]
    i0: Option<f64>,
    #[command(flatten)]
    geom: GeomArgs,
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let geom = args.geom.resolve()?;
    let mut spec = if args.geom.desk {
        CorruptionSpec::desk_scale(args.seed)
    } else {
        CorruptionSpec::full_scale(args.seed)
    };
    if let Some(v) = args.gain_fraction {
        spec.gain_fraction = v;
    }
    if let Some(v) = args.gain_amplitude {
        spec.gain_amplitude = v;
    }
    if let Some(v) = args.dead_start {
        let count = spec.dead_columns.len();
        spec.dead_columns = v..v + count;
    }
    if let Some(v) = args.dead_count {
        spec.dead_columns = spec.dead_columns.start..spec.dead_columns.start + v;
    }
    if let Some(v) = args.i0 {
        spec.i0 = v;
    }
    log_config(&json!({
        "command": "simulate",
        "phantom": args.phantom,
        "raster": args.raster,
        "seed": args.seed,
        "geometry": geometry_json(&geom),
        "gain_fraction": spec.gain_fraction,
        "gain_amplitude": spec.gain_amplitude,
        "dead_columns": [spec.dead_columns.start, spec.dead_columns.end],
        "i0": spec.i0,
        "out_clean": args.out_clean,
        "out_corrupt": args.out_corrupt,
        "out_geometry": args.out_geometry,
        "out_record": args.out_record,
        "out_phantom": args.out_phantom,
    }));

    let (phantom, raster) = make_phantom(&args.phantom, args.raster, geom.fov_radius())?;
    let clean = project_fan(&phantom, &geom)?;
    let (corrupted, record) = corrupt(&clean, &spec)?;
    write_sinogram(&args.out_clean, &clean)?;
    write_sinogram(&args.out_corrupt, &corrupted)?;
    if let Some(path) = &args.out_geometry {
        fs::write(path, geom.to_json())?;
    }
    if let Some(path) = &args.out_record {
        let full = json!({
            "gains": record.gains,
            "gained_columns": record.gained_columns,
            "dead_columns": record.dead_columns,
        });
        fs::write(path, format!("{full}\n"))?;
    }
    if let Some(path) = &args.out_phantom {
        write_image(path, &raster)?;
    }
    emit(&json!({
        "command": "simulate",
        "rows": clean.rows(),
        "cols": clean.cols(),
        "n_gained": record.gained_columns.len(),
        "dead_columns": record.dead_columns,
        "out_clean": args.out_clean,
        "out_corrupt": args.out_corrupt,
    }));
    Ok(())
}

#[derive(Args)]
struct DetectArgs {
    /// Input sinogram
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Detection threshold on the mean absolute angular difference
    #[arg(long, default_value_t = 1e-6)]
    mu: f64,
    /// Optional output path for the defect mask
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    log_config(&json!({
        "command": "detect",
        "in": args.input,
        "mu": args.mu,
        "out": args.out,
    }));
    let p = read_sinogram(&args.input)?;
    let mask = detect_defective(&p, args.mu)?;
    if let Some(path) = &args.out {
        write_mask(path, &mask)?;
    }
    emit(&json!({
        "command": "detect",
        "n_detectors": mask.n_detectors(),
        "defective_columns": mask.defective_columns(),
        "n_defective": mask.defective_columns().len(),
    }));
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum RegModeArg {
    SaOnly,
    IsOnly,
    Both,
    BothWeighted,
    BothUnsorted,
}

impl RegModeArg {
    fn to_mode(self) -> RegMode {
        match self {
            RegModeArg::SaOnly => RegMode::SaOnly,
            RegModeArg::IsOnly => RegMode::IsOnly,
            RegModeArg::Both => RegMode::Both,
            RegModeArg::BothWeighted => RegMode::BothWeighted,
            RegModeArg::BothUnsorted => RegMode::BothUnsorted,
        }
    }

    fn name(self) -> &'static str {
        match self {
            RegModeArg::SaOnly => "sa-only",
            RegModeArg::IsOnly => "is-only",
            RegModeArg::Both => "both",
            RegModeArg::BothWeighted => "both-weighted",
            RegModeArg::BothUnsorted => "both-unsorted",
        }
    }
}

#[derive(Args)]
struct CorrectArgs {
    /// Input corrupted sinogram
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Output path for the corrected sinogram
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Defect mask file; detected from the input when absent
    #[arg(long, value_name = "FILE")]
    mask: Option<PathBuf>,
    /// Optional output path for the detected or loaded mask
    #[arg(long, value_name = "FILE")]
    out_mask: Option<PathBuf>,
    /// Optional output path for the raw ideal-sinogram prediction
    #[arg(long, value_name = "FILE")]
    out_is: Option<PathBuf>,
    /// Optional output path for the stripe field image
    #[arg(long, value_name = "FILE")]
    out_sa: Option<PathBuf>,
    /// Optional output path for the trained model checkpoint
    #[arg(long, value_name = "FILE")]
    out_checkpoint: Option<PathBuf>,
    /// Number of optimization iterations
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Ideal-sinogram regularizer weight at iteration 0
    #[arg(long, default_value_t = 1e-4)]
    lambda_is_start: f64,
    /// Ideal-sinogram regularizer weight at the end of the ramp
    #[arg(long, default_value_t = 5e-3)]
    lambda_is_end: f64,
    /// Stripe regularizer weight at iteration 0
    #[arg(long, default_value_t = 1e-4)]
    lambda_sa_start: f64,
    /// Stripe regularizer weight at the end of the ramp
    #[arg(long, default_value_t = 1e-3)]
    lambda_sa_end: f64,
    /// Residual compensation strength
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    /// Detection threshold when no mask file is given
    #[arg(long, default_value_t = 1e-6)]
    mu: f64,
    /// Regularizer configuration
    #[arg(long, value_enum, default_value = "both-weighted")]
    reg_mode: RegModeArg,
    /// Seed for parameter initialization
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Iterations between training log lines
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Suppress per-iteration training log lines on standard output
    #[arg(long)]
    quiet: bool,
}

fn cmd_correct(args: CorrectArgs) -> Result<()> {
    let config = TrainConfig {
        iterations: args.iters,
        lr: args.lr,
        lambda_is_start: args.lambda_is_start,
        lambda_is_end: args.lambda_is_end,
        lambda_sa_start: args.lambda_sa_start,
        lambda_sa_end: args.lambda_sa_end,
        kappa: args.kappa,
        mu: args.mu,
        reg_mode: args.reg_mode.to_mode(),
        seed: args.seed,
        log_every: args.log_every,
    };
    log_config(&json!({
        "command": "correct",
        "in": args.input,
        "out": args.out,
        "mask": args.mask,
        "out_mask": args.out_mask,
        "out_is": args.out_is,
        "out_sa": args.out_sa,
        "out_checkpoint": args.out_checkpoint,
        "iters": config.iterations,
        "lr": config.lr,
        "lambda_is_start": config.lambda_is_start,
        "lambda_is_end": config.lambda_is_end,
        "lambda_sa_start": config.lambda_sa_start,
        "lambda_sa_end": config.lambda_sa_end,
        "kappa": config.kappa,
        "mu": config.mu,
        "reg_mode": args.reg_mode.name(),
        "seed": config.seed,
        "log_every": config.log_every,
        "quiet": args.quiet,
    }));

    let p = read_sinogram(&args.input)?;
    let mask = match &args.mask {
        Some(path) => {
            let m = read_mask(path)?;
            m.check_shape(p.rows(), p.cols())?;
            m
        }
        None => detect_defective(&p, config.mu)?,
    };

    let mut stdout = std::io::stdout().lock();
    let log: Option<&mut dyn Write> = if args.quiet { None } else { Some(&mut stdout) };
    let output = train_with_mask(&p, &mask, &config, log)?;

    let is_hat = predict_is(&output.models, &output.norm)?;
    let sa_hat = predict_sa(&output.models, &output.norm)?;
    let e = residual(p.grid(), is_hat.grid(), &sa_hat, &output.mask)?;
    let e_tilde = center_angular(&e);
    let corrected = compensate(&is_hat, &e_tilde, config.kappa)?;

    write_sinogram(&args.out, &corrected)?;
    if let Some(path) = &args.out_mask {
        write_mask(path, &output.mask)?;
    }
    if let Some(path) = &args.out_is {
        write_sinogram(path, &is_hat)?;
    }
    if let Some(path) = &args.out_sa {
        write_image(path, &sa_hat)?;
    }
    if let Some(path) = &args.out_checkpoint {
        write_checkpoint(path, &output.models.to_checkpoint())?;
    }

    let final_loss = output.report.entries.last().map(|e| e.loss);
    emit(&json!({
        "command": "correct",
        "rows": p.rows(),
        "cols": p.cols(),
        "defective_columns": output.mask.defective_columns(),
        "iterations": config.iterations,
        "final_loss": final_loss.map_or(json!(null), num_or_inf),
        "wall_clock_secs": output.report.wall_clock_secs,
        "out": args.out,
    }));
    Ok(())
}

#[derive(Args)]
struct BaselineArgs {
    /// Input corrupted sinogram
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Output path for the filtered sinogram
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Odd median window in detector bins
    #[arg(long, default_value_t = 31)]
    window: usize,
}

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    log_config(&json!({
        "command": "baseline",
        "in": args.input,
        "out": args.out,
        "window": args.window,
    }));
    let p = read_sinogram(&args.input)?;
    let filtered = sorted_median_baseline(&p, args.window)?;
    write_sinogram(&args.out, &filtered)?;
    emit(&json!({
        "command": "baseline",
        "rows": filtered.rows(),
        "cols": filtered.cols(),
        "window": args.window,
        "out": args.out,
    }));
    Ok(())
}

#[derive(Args)]
struct FbpArgs {
    /// Input sinogram
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Output path for the reconstructed image
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Output image size in pixels per side
    #[arg(long, value_name = "N", default_value_t = 256)]
    size: usize,
    #[command(flatten)]
    geom: GeomArgs,
}

fn cmd_fbp(args: FbpArgs) -> Result<()> {
    let geom = args.geom.resolve()?;
    log_config(&json!({
        "command": "fbp",
        "in": args.input,
        "out": args.out,
        "size": args.size,
        "geometry": geometry_json(&geom),
    }));
    let p = read_sinogram(&args.input)?;
    let image = fbp_fan(&p, &geom, args.size)?;
    write_image(&args.out, &image)?;
    emit(&json!({
        "command": "fbp",
        "size": args.size,
        "fov_radius_mm": geom.fov_radius(),
        "out": args.out,
    }));
    Ok(())
}

#[derive(Args)]
struct MetricsArgs {
    /// Image or sinogram to score
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Reference image or sinogram
    #[arg(long, value_name = "FILE")]
    reference: PathBuf,
    /// Use the union of both value ranges for the SSIM dynamic range
    #[arg(long)]
    union_range: bool,
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    log_config(&json!({
        "command": "metrics",
        "in": args.input,
        "reference": args.reference,
        "union_range": args.union_range,
    }));
    let a = read_any_grid(&args.input)?;
    let reference = read_any_grid(&args.reference)?;
    let psnr_db = psnr(&a, &reference)?;
    let ssim_v = ssim(&a, &reference, args.union_range)?;
    let mse_v = mse(&a, &reference)?;
    emit(&json!({
        "command": "metrics",
        "psnr_db": num_or_inf(psnr_db),
        "ssim": num_or_inf(ssim_v),
        "mse": num_or_inf(mse_v),
    }));
    Ok(())
}

#[derive(Args)]
struct ExportPgmArgs {
    /// Input image or sinogram
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Output PGM path
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Display window lower bound
    #[arg(long, default_value_t = 0.0)]
    lo: f64,
    /// Display window upper bound
    #[arg(long, default_value_t = 1.0)]
    hi: f64,
}

fn cmd_export_pgm(args: ExportPgmArgs) -> Result<()> {
    log_config(&json!({
        "command": "export-pgm",
        "in": args.input,
        "out": args.out,
        "lo": args.lo,
        "hi": args.hi,
    }));
    let g = read_any_grid(&args.input)?;
    let bytes = encode_pgm16(&g, args.lo, args.hi)?;
    fs::write(&args.out, bytes)?;
    emit(&json!({
        "command": "export-pgm",
        "rows": g.rows(),
        "cols": g.cols(),
        "lo": args.lo,
        "hi": args.hi,
        "out": args.out,
    }));
    Ok(())
}
