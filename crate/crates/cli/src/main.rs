use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seamweld::batch::{read_manifest, run_batch};
use seamweld::imaging::{load_aligned_pair, write_atomic, write_image_with_mask, write_seam_visualization};
use seamweld::pipeline::{stitch, to_json, write_artifacts, ArtifactPaths, StitchConfig};
use seamweld::quality::{evaluate_seam, seam_metrics, DEFAULT_K, DEFAULT_MARGIN, DEFAULT_WINDOW};
use seamweld::seam::{extract_seam_path, LabelMask};
use seamweld::{Error, Execution, LpamConfig};

#[derive(Parser)]
#[command(name = "seamweld", version, about = "Seam stitching of pre-aligned image pairs with local patch realignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stitch one aligned pair and write the mosaic.
    Stitch(StitchArgs),
    /// Score the seam implied by a label mask.
    Evaluate(EvaluateArgs),
    /// Process every pair of a manifest, with and without repair.
    Batch(BatchArgs),
    /// Draw the seam of a label mask, colored by local quality.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct Tuning {
    /// Seam quality window side (odd, >= 3).
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Plausibility factor: the seam is accepted when max Q <= k * mean Q.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: f64,
    /// Steepness of the flow ramp.
    #[arg(long, default_value_t = seamweld::lpam::DEFAULT_BETA)]
    beta: f64,
    /// Context pixels around each misaligned run.
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: usize,
    /// Run every stage on the calling thread.
    #[arg(long)]
    sequential: bool,
}

impl Tuning {
    fn config(&self) -> LpamConfig {
        let exec = if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        };
        let mut cfg = LpamConfig {
            window: self.window,
            k: self.k,
            beta: self.beta,
            margin: self.margin,
            exec,
            ..LpamConfig::default()
        };
        cfg.flow.exec = exec;
        cfg
    }
}

#[derive(Args)]
struct StitchArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Mosaic PNG.
    #[arg(long)]
    out: PathBuf,
    /// Stop after the global seam.
    #[arg(long)]
    no_lpam: bool,
    #[command(flatten)]
    tuning: Tuning,
    #[arg(long, value_name = "PATH")]
    seam_vis: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    metrics: Option<PathBuf>,
    /// Repair report JSON; ignored with --no-lpam.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Final label mask (0/255 PNG).
    #[arg(long, value_name = "PATH")]
    labels: Option<PathBuf>,
    /// Target after patch realignment (RGBA PNG); the final labels refer to
    /// this image.
    #[arg(long, value_name = "PATH")]
    warped_target: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Label mask: 1-channel PNG, 0 = target, 255 = reference.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::EmptyOverlap => 3,
        Error::Read { .. }
        | Error::DimensionMismatch(..)
        | Error::InvalidParameter(_)
        | Error::Unanchored(_)
        | Error::EmptySeam
        | Error::UnscorableSeam
        | Error::PatchTooSmall { .. }
        | Error::Manifest { .. } => 2,
        _ => 4,
    }
}

fn cmd_stitch(args: &StitchArgs) -> seamweld::Result<()> {
    let config = StitchConfig {
        lpam: args.tuning.config(),
        lpam_enabled: !args.no_lpam,
    };
    config.lpam.validate()?;
    let pair = load_aligned_pair(&args.target, &args.reference)?;
    let output = stitch(&pair, &config)?;
    let paths = ArtifactPaths {
        mosaic: Some(args.out.clone()),
        labels: args.labels.clone(),
        seam_vis: args.seam_vis.clone(),
        metrics: args.metrics.clone(),
        report: args.report.clone(),
    };
    write_artifacts(&output, &pair, &paths)?;
    if let Some(p) = &args.warped_target {
        let final_pair = output.final_pair(&pair);
        write_image_with_mask(&final_pair.target, &final_pair.target_mask, p)?;
    }
    Ok(())
}

fn load_labels(target: &Path, reference: &Path, labels: &Path) -> seamweld::Result<(seamweld::AlignedPair, LabelMask)> {
    let pair = load_aligned_pair(target, reference)?;
    let mask = LabelMask::read_png(&pair, labels)?;
    Ok((pair, mask))
}

fn cmd_evaluate(args: &EvaluateArgs) -> seamweld::Result<()> {
    if args.window < 3 || args.window.is_multiple_of(2) {
        return Err(Error::InvalidParameter("window must be odd and >= 3".into()));
    }
    let (pair, mask) = load_labels(&args.target, &args.reference, &args.labels)?;
    let seam = extract_seam_path(&mask)?;
    let json = to_json(&seam_metrics(&pair, &seam, args.window)?);
    if let Some(p) = &args.out {
        write_atomic(p, &json)?;
    }
    print!("{}", String::from_utf8_lossy(&json));
    Ok(())
}

fn cmd_batch(args: &BatchArgs) -> seamweld::Result<()> {
    let config = args.tuning.config();
    config.validate()?;
    let entries = read_manifest(&args.manifest)?;
    let summary = run_batch(&entries, &args.out_dir, &config)?;
    print!("{}", summary.table());
    for p in summary.pairs.iter().filter(|p| !p.ok) {
        eprintln!("seamweld: {} failed: {}", p.name, p.error.as_deref().unwrap_or("unknown error"));
    }
    Ok(())
}

fn cmd_visualize(args: &VisualizeArgs) -> seamweld::Result<()> {
    let (pair, mask) = load_labels(&args.target, &args.reference, &args.labels)?;
    let seam = extract_seam_path(&mask)?;
    let profile = evaluate_seam(&pair, &seam, args.window)?;
    write_seam_visualization(&pair, &seam, &profile.values, &args.out)
}

#[cfg(feature = "parallel")]
fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("SEAMWELD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SEAMWELD_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

#[cfg(not(feature = "parallel"))]
fn configure_threads() -> Result<(), String> {
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("seamweld: {msg}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Stitch(a) => cmd_stitch(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Batch(a) => cmd_batch(a),
        Command::Visualize(a) => cmd_visualize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seamweld: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
