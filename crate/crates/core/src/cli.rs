//! The `tetranet` command line.
//!
//! Exit codes: 0 on success, 1 for usage, configuration, input and I/O
//! errors, 2 for numerical failures (non-finite loss, failed gradient
//! check).

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{write_phantom_dataset, Dataset, LabelMap, PhantomSpec, Volume};
use crate::error::{Error, Result};
use crate::gradcheck::{network_check, operator_suite, GradCheckConfig, NETWORK_STEP};
use crate::losses::{ncc_value, LossConfig};
use crate::metrics::{jacobian_nonpositive_fraction, MetricReport};
use crate::train::{pretrain_then_extend, read_config, run_ablation, AblationSuite, Checkpoint, TrainConfig, TrainOutput, Trainer};
use crate::warp::{warp_labels, warp_volume, DeformationField};
use crate::{arch::ModelConfig, parallel};

#[derive(Parser, Debug)]
#[command(name = "tetranet", version, about = "Unsupervised 3D deformable registration with Tetrahedron-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Register a moving volume to a fixed volume with a trained checkpoint.
    Register(RegisterArgs),
    /// Compute Dice and Jacobian metrics for a registration.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write volume slices and deformed-grid overlays as plain PGM images.
    ExportSlices(ExportArgs),
    /// Train and compare the configurations of an ablation suite.
    Ablation(AblationArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"], default_values_t = [32, 32, 32])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest true displacement, in voxels.
    #[arg(long, default_value_t = 4.0)]
    amplitude: f64,
    /// Smoothing of the true field, in voxels.
    #[arg(long, default_value_t = 4.0)]
    sigma: f64,
    #[arg(long, default_value_t = 6)]
    blobs: usize,
    /// Train, validation and test fractions.
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"], default_values_t = [0.7, 0.1, 0.2])]
    split: Vec<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model and training settings (`key: value` lines); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Pretrain the encoder and first decoder before training the full model.
    #[arg(long)]
    pretrain: bool,
    /// Single-threaded execution.
    #[arg(long)]
    deterministic: bool,
    /// Continue from a checkpoint directory.
    #[arg(long, conflicts_with = "pretrain")]
    resume: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Labels of the moving volume, warped alongside it.
    #[arg(long)]
    moving_labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    fixed_labels: PathBuf,
    #[arg(long)]
    warped_labels: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Volume side of the network check (divisible by 4).
    #[arg(long, default_value_t = 8)]
    scale: usize,
    /// Tolerance of the network check.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Tolerance of the per-operator checks.
    #[arg(long, default_value_t = 1e-5)]
    op_tolerance: f64,
    /// Check at most this many elements per parameter tensor.
    #[arg(long)]
    max_checks: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SliceAxis {
    /// First array axis (depth).
    Z,
    /// Second array axis (height).
    Y,
    /// Third array axis (width).
    X,
}

impl SliceAxis {
    fn index(self) -> usize {
        match self {
            SliceAxis::Z => 0,
            SliceAxis::Y => 1,
            SliceAxis::X => 2,
        }
    }
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Field drawn as a deformed grid over each slice.
    #[arg(long)]
    field: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SliceAxis::Z)]
    axis: SliceAxis,
    #[arg(long)]
    out: PathBuf,
    /// Grid line spacing in voxels.
    #[arg(long, default_value_t = 4)]
    grid: usize,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// pretrain, enc_skips, levels or dec2_variant.
    #[arg(long)]
    suite: String,
    /// CSV table to write.
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-run logs and checkpoints.
    #[arg(long)]
    runs: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    quiet: bool,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Register(a) => register(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ExportSlices(a) => export_slices(a),
        Command::Ablation(a) => ablation(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = PhantomSpec {
        dims: [a.dims[0], a.dims[1], a.dims[2]],
        n_blobs: a.blobs,
        seed: a.seed,
        field_amplitude: a.amplitude,
        field_smoothness: a.sigma,
    };
    let split = write_phantom_dataset(&a.out, &spec, a.pairs, [a.split[0], a.split[1], a.split[2]])?;
    println!(
        "wrote {} pairs to {} (train {}, val {}, test {})",
        a.pairs,
        a.out.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn load_configs(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    match path {
        Some(p) => read_config(p),
        None => Ok((ModelConfig::default(), TrainConfig::default())),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    parallel::configure(a.deterministic)?;
    let data = Dataset::load(&a.data)?;
    let out = TrainOutput {
        dir: Some(a.out.clone()),
        verbose: !a.quiet,
    };
    if let Some(ck) = &a.resume {
        let mut t = Trainer::from_checkpoint(Checkpoint::load(ck)?)?;
        if let Some(p) = &a.config {
            let (m, c) = read_config(p)?;
            if m != *t.model.config() {
                return Err(Error::config("model settings differ from the resumed checkpoint"));
            }
            t.cfg = c;
        }
        t.train(&data, &out)?;
        println!("trained to epoch {}; checkpoint in {}", t.epoch, a.out.join("final").display());
        return Ok(());
    }
    let (model_cfg, cfg) = load_configs(a.config.as_deref())?;
    if a.pretrain {
        let r = pretrain_then_extend(&data, &model_cfg, &cfg, &out)?;
        println!(
            "stage 1: {} epochs, stage 2: {} epochs; stage-2 start dice {:.4} (untrained {:.4})",
            r.stage1.epoch, r.stage2.epoch, r.stage2_start.dice_after, r.untrained.dice_after
        );
        println!("logs in {0}/stage1 and {0}/stage2", a.out.display());
    } else {
        let mut t = Trainer::from_configs(&model_cfg, &cfg)?;
        t.train(&data, &out)?;
        println!("trained {} epochs; checkpoint in {}", t.epoch, a.out.join("final").display());
    }
    Ok(())
}

fn register(a: RegisterArgs) -> Result<()> {
    parallel::configure(a.deterministic)?;
    if !a.checkpoint.join("manifest.txt").exists() {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint directory", a.checkpoint.display())));
    }
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    let fixed = Volume::read(&a.fixed)?;
    let moving = Volume::read(&a.moving)?;
    if fixed.dims != moving.dims {
        return Err(Error::input(format!(
            "fixed dims {:?} differ from moving dims {:?}",
            fixed.dims, moving.dims
        )));
    }
    let field = DeformationField::from_tensor(&model.predict(&fixed.to_tensor(), &moving.to_tensor())?)?;
    let warped = warp_volume(&moving, &field)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    field.write(&a.out.join("field"))?;
    warped.write(&a.out.join("warped"))?;
    if let Some(l) = &a.moving_labels {
        warp_labels(&LabelMap::read(l)?, &field)?.write(&a.out.join("warped_labels"))?;
    }
    let ncc = ncc_value(&fixed.to_tensor(), &warped.to_tensor(), &LossConfig::default())?;
    println!(
        "ncc_loss {ncc:.6} jac_fraction {:.6} max_displacement {:.4}",
        jacobian_nonpositive_fraction(&field, None)?,
        field.max_abs()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let fixed = LabelMap::read(&a.fixed_labels)?;
    let warped = LabelMap::read(&a.warped_labels)?;
    let field = DeformationField::read(&a.field)?;
    let report = MetricReport::compute(&fixed, &warped, &field)?;
    let file = fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    report.write_csv(file)?;
    println!(
        "mean_dice {:.6} jac_fraction {:.6}",
        report.mean_dice, report.nonpositive_jacobian_fraction
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let op_cfg = GradCheckConfig {
        tolerance: a.op_tolerance,
        seed: a.seed,
        ..Default::default()
    };
    let mut reports = operator_suite(&op_cfg)?;
    reports.push(network_check(
        a.scale,
        &GradCheckConfig {
            step: NETWORK_STEP,
            tolerance: a.tolerance,
            max_checks_per_input: a.max_checks,
            seed: a.seed,
            ..Default::default()
        },
    )?);
    let mut failed = 0;
    for r in &reports {
        println!("{r}");
        failed += (!r.passed()) as usize;
    }
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

/// Plain (`P2`) graymap text.
pub fn pgm(width: usize, height: usize, pixels: &[u8]) -> String {
    let mut s = format!("P2\n{width} {height}\n255\n");
    for row in pixels.chunks(width) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn export_slices(a: ExportArgs) -> Result<()> {
    let vol = Volume::read(&a.volume)?;
    let field = a.field.as_deref().map(DeformationField::read).transpose()?;
    if let Some(f) = &field {
        if f.dims != vol.dims {
            return Err(Error::input(format!(
                "field dims {:?} differ from volume dims {:?}",
                f.dims, vol.dims
            )));
        }
    }
    if a.grid == 0 {
        return Err(Error::config("grid spacing must be positive"));
    }
    let written = write_slices(&vol, field.as_ref(), a.axis.index(), a.grid, &a.out)?;
    println!("wrote {written} slices to {}", a.out.display());
    Ok(())
}

/// Writes `slice_NNN.pgm` for every slice along `axis` and, with a field,
/// `grid_NNN.pgm` showing the slice under a grid deformed by the in-plane
/// displacement. Creates `out` if needed. Returns the slice count.
pub fn write_slices(vol: &Volume, field: Option<&DeformationField>, axis: usize, grid: usize, out: &Path) -> Result<usize> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dims = vol.dims;
    let (lo, hi) = vol
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray = |x: f64| (((x - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
    let (ra, ca) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (rows, cols) = (dims[ra], dims[ca]);
    let v = dims[0] * dims[1] * dims[2];
    for k in 0..dims[axis] {
        let mut pixels = Vec::with_capacity(rows * cols);
        let mut overlay = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let mut p = [0; 3];
                p[axis] = k;
                p[ra] = r;
                p[ca] = c;
                let value = gray(vol.at(p));
                pixels.push(value);
                if let Some(f) = field {
                    let i = (p[0] * dims[1] + p[1]) * dims[2] + p[2];
                    let on_line = |base: usize, comp: usize| {
                        let x = base as f64 + f.data[comp * v + i];
                        (x.round() as i64).rem_euclid(grid as i64) == 0
                    };
                    overlay.push(if on_line(r, ra) || on_line(c, ca) { 255 } else { value / 2 });
                }
            }
        }
        let write = |name: String, px: &[u8]| -> Result<()> {
            let path = out.join(name);
            fs::File::create(&path)
                .and_then(|mut f| f.write_all(pgm(cols, rows, px).as_bytes()))
                .map_err(|e| Error::io(&path, e))
        };
        write(format!("slice_{k:03}.pgm"), &pixels)?;
        if field.is_some() {
            write(format!("grid_{k:03}.pgm"), &overlay)?;
        }
    }
    Ok(dims[axis])
}

fn ablation(a: AblationArgs) -> Result<()> {
    parallel::configure(a.deterministic)?;
    let suite: AblationSuite = a.suite.parse()?;
    let data = Dataset::load(&a.data)?;
    let (model_cfg, cfg) = load_configs(a.config.as_deref())?;
    let table = run_ablation(
        suite,
        &data,
        &model_cfg,
        &cfg,
        &TrainOutput {
            dir: a.runs.clone(),
            verbose: !a.quiet,
        },
    )?;
    let file = fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    table.write_csv(file)?;
    print!("{table}");
    Ok(())
}
