//! `lrf`: train, apply and inspect local-receptive-field regression
//! models for paired image-to-image mapping.
//!
//! Subcommands: `train`, `synth`, `refine`, `eval`, `cv` and
//! `inspect {mask|model}`. All file outputs are written atomically
//! (temp file + rename). Exit codes: 0 success, 2 usage, 3 data error,
//! 4 numeric error, 5 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use lrf::dataset::{load_manifest, read_manifest, split_indices, write_manifest};
use lrf::evaluation::{cross_validate, fit_from_pairs, model_mse_x100, CvGrid, FitSpec};
use lrf::refinement::{compute_alpha, refine, rescale_unit, AlphaParams};
use lrf::topology::Topology;
use lrf::{
    atomic_write, ChannelStrategy, ErrorClass, ImageBuffer, LrfError, RfGeometry, SolverKind,
    SparseRowModel, SplitSpec,
};

#[derive(Parser)]
#[command(
    name = "lrf",
    version,
    about = "Masked linear regression with local receptive fields for image-to-image mapping"
)]
struct Cli {
    /// Worker threads for row-parallel solves (defaults to all cores).
    #[arg(long, global = true, env = "LRF_JOBS", value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,

    /// Print wall-clock timings (training, per-image synthesis).
    #[arg(long, global = true)]
    time: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on every pair in a manifest and save it as .lrm.
    Train(TrainArgs),
    /// Apply a model to one input image.
    Synth(SynthArgs),
    /// Blend an input with its synthesized output via the model's alpha map.
    Refine(RefineArgs),
    /// Score a model on a manifest of held-out pairs (prints mse_x100).
    Eval(EvalArgs),
    /// Cross-validate the regularizer on a seeded split, then refit on
    /// train + validation at the winning value.
    Cv(CvArgs),
    /// Print model or mask internals.
    Inspect {
        #[command(subcommand)]
        what: InspectCommand,
    },
}

/// Flags shared by every fitting subcommand.
#[derive(Args)]
struct FitArgs {
    /// Two-column CSV manifest: input_path,target_path (no header).
    #[arg(long, value_name = "CSV")]
    manifest: PathBuf,

    /// Fitting algorithm.
    #[arg(long, default_value = "mr", value_parser = SolverKind::from_str)]
    solver: SolverKind,

    /// Receptive-field side r (odd; used by the mr solver).
    #[arg(long, default_value_t = 3, value_name = "R")]
    rf: usize,

    /// Spacing between receptive-field taps.
    #[arg(long, default_value_t = 1, value_name = "D")]
    dilation: usize,

    /// How color channels map onto learned mappings.
    #[arg(long, default_value = "gray", value_parser = ChannelStrategy::from_str)]
    strategy: ChannelStrategy,

    /// LASSO convergence tolerance (max coordinate update).
    #[arg(long, default_value_t = 1e-7)]
    lasso_tol: f64,

    /// LASSO sweep budget.
    #[arg(long, default_value_t = 10_000)]
    lasso_sweeps: usize,
}

impl FitArgs {
    fn spec(&self) -> FitSpec {
        let mut spec = FitSpec::new(self.solver, self.strategy).with_rf(self.rf, self.dilation);
        spec.lasso.tol = self.lasso_tol;
        spec.lasso.max_sweeps = self.lasso_sweeps;
        spec
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    fit: FitArgs,

    /// Regularizer value (atom budget for omp).
    #[arg(long, value_name = "V")]
    lambda: f64,

    /// Accepted for config uniformity; every solver here is deterministic,
    /// so the seed does not influence training.
    #[arg(long, default_value_t = 0)]
    #[allow(dead_code)]
    seed: u64,

    /// Output model path (.lrm).
    #[arg(long, value_name = "LRM")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Trained model (.lrm).
    #[arg(long, value_name = "LRM")]
    model: PathBuf,

    /// Input image (PNG or PGM/PPM).
    #[arg(long = "in", value_name = "IMAGE")]
    input: PathBuf,

    /// Output image path.
    #[arg(long, value_name = "IMAGE")]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    /// Trained model (.lrm); its receptive-field statistics drive alpha.
    #[arg(long, value_name = "LRM")]
    model: PathBuf,

    /// Original input image.
    #[arg(long = "in", value_name = "IMAGE")]
    input: PathBuf,

    /// Synthesized output to be blended with the input.
    #[arg(long, value_name = "IMAGE")]
    synth: PathBuf,

    /// Refined output path.
    #[arg(long, value_name = "IMAGE")]
    out: PathBuf,

    /// Optional grayscale export of the alpha map.
    #[arg(long, value_name = "IMAGE")]
    alpha_out: Option<PathBuf>,

    /// Logistic threshold tau.
    #[arg(long, default_value_t = 0.2)]
    tau: f64,

    /// Logistic steepness k.
    #[arg(long, default_value_t = 10.0)]
    steepness: f64,

    /// Disk dilation radius in pixels (default: 3% of the smaller
    /// output dimension, at least 1).
    #[arg(long, value_name = "PX")]
    radius: Option<usize>,

    /// Gaussian blur sigma in pixels (default: 2% of the smaller output
    /// dimension, at least 0.5).
    #[arg(long, value_name = "PX")]
    sigma: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model (.lrm).
    #[arg(long, value_name = "LRM")]
    model: PathBuf,

    /// Manifest of held-out pairs.
    #[arg(long, value_name = "CSV")]
    manifest: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    fit: FitArgs,

    /// Train,validation,test fractions (must sum to 1).
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_split)]
    split: SplitFractions,

    /// Shuffle seed for the split.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// `default` for the solver's published grid, or a comma-separated
    /// increasing list of values.
    #[arg(long, default_value = "default", value_parser = parse_grid)]
    grid: GridArg,

    /// Where to save the model refit on train + validation.
    #[arg(long, value_name = "LRM")]
    out: Option<PathBuf>,

    /// Also write the (lambda, val_mse_x100) table to a CSV file.
    #[arg(long, value_name = "CSV")]
    report: Option<PathBuf>,

    /// Write the held-out test portion as a manifest (resolved paths).
    #[arg(long, value_name = "CSV")]
    test_out: Option<PathBuf>,

    /// Write the train + validation portion as a manifest (resolved paths).
    #[arg(long, value_name = "CSV")]
    trainval_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum InspectCommand {
    /// Render the 0/1 mask pattern for a geometry (1-based indices,
    /// blanks for zeros; small geometries only).
    Mask(MaskArgs),
    /// Print a saved model's geometry, parameter count and sparsity.
    Model(ModelArgs),
}

#[derive(Args)]
struct MaskArgs {
    /// Image size as HxW (e.g. 5x5).
    #[arg(long, value_parser = parse_size)]
    size: (usize, usize),

    /// Receptive-field side r.
    #[arg(long, value_name = "R")]
    rf: usize,

    /// Spacing between receptive-field taps.
    #[arg(long, default_value_t = 1, value_name = "D")]
    dilation: usize,
}

#[derive(Args)]
struct ModelArgs {
    /// Model file (.lrm).
    #[arg(long, value_name = "LRM")]
    model: PathBuf,

    /// Export the bias image, min-max rescaled for visibility, as PNG.
    #[arg(long, value_name = "IMAGE")]
    bias_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy)]
struct SplitFractions {
    train: f64,
    val: f64,
    test: f64,
}

fn parse_split(raw: &str) -> Result<SplitFractions, String> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected train,val,test fractions, got '{raw}'"));
    }
    let frac = |s: &str| -> Result<f64, String> {
        s.trim()
            .parse::<f64>()
            .map_err(|e| format!("bad fraction '{s}': {e}"))
    };
    Ok(SplitFractions {
        train: frac(parts[0])?,
        val: frac(parts[1])?,
        test: frac(parts[2])?,
    })
}

#[derive(Debug, Clone)]
enum GridArg {
    Default,
    Custom(Vec<f64>),
}

fn parse_grid(raw: &str) -> Result<GridArg, String> {
    if raw == "default" {
        return Ok(GridArg::Default);
    }
    let values = raw
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad grid value '{s}': {e}"))
        })
        .collect::<Result<Vec<f64>, String>>()?;
    Ok(GridArg::Custom(values))
}

fn parse_size(raw: &str) -> Result<(usize, usize), String> {
    let (h, w) = raw
        .split_once('x')
        .ok_or_else(|| format!("expected HxW, got '{raw}'"))?;
    let dim = |s: &str| -> Result<usize, String> {
        s.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad dimension '{s}': {e}"))
    };
    Ok((dim(h)?, dim(w)?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // First and only pool configuration in this process; a failure
        // here means the pool was already initialized, which cannot
        // happen before any parallel work has run.
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs as usize)
            .build_global()
            .expect("worker pool configured before first use");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (label, code) = match err.class() {
                ErrorClass::Data => ("data", 3),
                ErrorClass::Numeric => ("numeric", 4),
                ErrorClass::Io => ("io", 5),
            };
            eprintln!("error ({label}): {err}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> lrf::Result<()> {
    match cli.command {
        Command::Train(args) => run_train(args, cli.time),
        Command::Synth(args) => run_synth(args, cli.time),
        Command::Refine(args) => run_refine(args),
        Command::Eval(args) => run_eval(args),
        Command::Cv(args) => run_cv(args),
        Command::Inspect { what } => match what {
            InspectCommand::Mask(args) => run_inspect_mask(args),
            InspectCommand::Model(args) => run_inspect_model(args),
        },
    }
}

fn run_train(args: TrainArgs, time: bool) -> lrf::Result<()> {
    let pairs = load_manifest(&args.fit.manifest)?;
    if pairs.is_empty() {
        return Err(LrfError::Data(format!(
            "{}: manifest lists no pairs",
            args.fit.manifest.display()
        )));
    }
    let spec = args.fit.spec();
    let started = Instant::now();
    let model = fit_from_pairs(&pairs, &spec, args.lambda)?;
    let train_time = started.elapsed();
    model.save(&args.out)?;
    if time {
        println!("timing: train {:.3} s", train_time.as_secs_f64());
    }
    Ok(())
}

fn run_synth(args: SynthArgs, time: bool) -> lrf::Result<()> {
    let model = SparseRowModel::load(&args.model)?;
    let input = ImageBuffer::load(&args.input)?;
    let started = Instant::now();
    let output = model.synthesize(&input)?;
    let synth_time = started.elapsed();
    output.save(&args.out)?;
    if time {
        println!("timing: synth {:.3} ms", synth_time.as_secs_f64() * 1e3);
    }
    Ok(())
}

fn run_refine(args: RefineArgs) -> lrf::Result<()> {
    let model = SparseRowModel::load(&args.model)?;
    let geometry = model.geometry();
    let defaults = AlphaParams::for_size(geometry.out_height, geometry.out_width);
    let params = AlphaParams::new(
        args.steepness,
        args.tau,
        args.radius.unwrap_or(defaults.dilation_radius),
        args.sigma.unwrap_or(defaults.gaussian_sigma),
    )?;
    let alpha = compute_alpha(&model, &params)?;
    let input = ImageBuffer::load(&args.input)?;
    let synth = ImageBuffer::load(&args.synth)?;
    let refined = refine(&input, &synth, &alpha)?;
    refined.save(&args.out)?;
    if let Some(path) = &args.alpha_out {
        alpha.to_image().save(path)?;
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> lrf::Result<()> {
    let model = SparseRowModel::load(&args.model)?;
    let pairs = load_manifest(&args.manifest)?;
    let score = model_mse_x100(&model, &pairs)?;
    println!("mse_x100 {score}");
    Ok(())
}

fn run_cv(args: CvArgs) -> lrf::Result<()> {
    let entries = read_manifest(&args.fit.manifest)?;
    let split = SplitSpec::new(args.split.train, args.split.val, args.split.test, args.seed)?;
    let (i_train, i_val, i_test) = split_indices(entries.len(), &split)?;
    if i_val.is_empty() {
        return Err(LrfError::Data(format!(
            "split of {} pairs leaves an empty validation set",
            entries.len()
        )));
    }
    let load = |indices: &[usize]| -> lrf::Result<Vec<lrf::ImagePair>> {
        indices.iter().map(|&i| entries[i].load()).collect()
    };
    let train = load(&i_train)?;
    let val = load(&i_val)?;

    let spec = args.fit.spec();
    let grid = match &args.grid {
        GridArg::Default => match spec.solver {
            SolverKind::Masked => CvGrid::default_masked(),
            SolverKind::Ridge => CvGrid::default_ridge(),
            SolverKind::Lasso => CvGrid::default_lasso(),
            SolverKind::Omp => CvGrid::default_omp(train.len())?,
        },
        GridArg::Custom(values) => CvGrid::new(spec.solver, values.clone())?,
    };
    let outcome = cross_validate(&train, &val, &spec, &grid)?;

    let mut table = String::from("lambda,val_mse_x100\n");
    for (lambda, score) in &outcome.scores {
        table.push_str(&format!("{lambda},{score}\n"));
    }
    print!("{table}");
    println!("best,{}", outcome.best_lambda);

    if let Some(path) = &args.report {
        atomic_write(path, table.as_bytes())?;
    }
    if let Some(path) = &args.out {
        outcome.model.save(path)?;
    }
    if let Some(path) = &args.trainval_out {
        let trainval: Vec<_> = i_train
            .iter()
            .chain(&i_val)
            .map(|&i| entries[i].clone())
            .collect();
        write_manifest(path, &trainval)?;
    }
    if let Some(path) = &args.test_out {
        let test: Vec<_> = i_test.iter().map(|&i| entries[i].clone()).collect();
        write_manifest(path, &test)?;
    }
    Ok(())
}

fn run_inspect_mask(args: MaskArgs) -> lrf::Result<()> {
    let (height, width) = args.size;
    let geometry = RfGeometry {
        in_height: height,
        in_width: width,
        out_height: height,
        out_width: width,
        taps_per_side: args.rf,
        dilation: args.dilation,
    };
    let topology = Topology::build(geometry)?;
    print!("{}", topology.render_mask_text()?);
    Ok(())
}

fn run_inspect_model(args: ModelArgs) -> lrf::Result<()> {
    let model = SparseRowModel::load(&args.model)?;
    let g = model.geometry();
    println!(
        "geometry: {}x{} -> {}x{}, rf {}x{}, dilation {}",
        g.in_height, g.in_width, g.out_height, g.out_width, g.taps_per_side, g.taps_per_side, g.dilation
    );
    println!("strategy: {}", model.strategy());
    println!("mappings: {}", model.channel_maps().len());
    println!("parameters: {}", model.parameter_count());
    println!("nonzeros: {}", model.count_nonzeros(0.0)?);
    if let Some(path) = &args.bias_out {
        bias_image(&model).save(path)?;
    }
    Ok(())
}

/// The per-pixel bias terms as an image, min-max rescaled per mapping
/// for visibility. Three mappings render as RGB, one as grayscale.
fn bias_image(model: &SparseRowModel) -> ImageBuffer {
    let g = model.geometry();
    let mut data = Vec::with_capacity(g.output_dim() * model.channel_maps().len());
    for map in model.channel_maps() {
        let biases: Vec<f64> = map.iter().map(|row| row.bias).collect();
        data.extend(rescale_unit(&biases));
    }
    ImageBuffer::new(g.out_height, g.out_width, model.channel_maps().len(), data)
        .expect("rescaled biases lie in [0, 1]")
}
