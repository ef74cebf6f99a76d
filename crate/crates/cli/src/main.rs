//! `fsl`: synthesize or embed datasets, run cross-validated few-shot
//! experiments and aggregate their reports.
//!
//! Exit status: 0 success, 2 configuration or usage error, 3 I/O error,
//! 4 infeasible episodes, 1 anything else. `FSL_THREADS` sets the worker
//! count (0 or unset: one per core).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsl_core::embedio::{load_dataset, save_dataset, synth_dataset, SynthSpec};
use fsl_core::experiment::{self, summarize, summary_csv, ExperimentConfig};
use fsl_core::imageprep::{self, AugmentPolicy, CircleSpec, EmbedSettings};
use fsl_core::par::Execution;
use fsl_core::{ErrorKind, FslError};

#[derive(Parser)]
#[command(name = "fsl", version, about = "Patient-level few-shot evaluation on frame embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic patient-clustered dataset.
    Synth(SynthArgs),
    /// Embed a folder of grayscale PNG frames.
    Embed(EmbedArgs),
    /// Cross-validate every configured head on one dataset.
    Run(RunArgs),
    /// Train on one dataset, evaluate on the patients of another.
    Transfer(TransferArgs),
    /// Aggregate report JSONs into one table, with optional PCA exports.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    patients: usize,
    /// Frames per patient and class.
    #[arg(long)]
    frames: usize,
    #[arg(long)]
    dim: usize,
    /// Distance between the class means.
    #[arg(long)]
    sep: f64,
    /// Standard deviation of the per-patient offset.
    #[arg(long)]
    psigma: f64,
    /// Standard deviation of the per-frame noise.
    #[arg(long)]
    nsigma: f64,
    /// Fraction of patients that also carry malignant frames.
    #[arg(long, default_value_t = 1.0)]
    malignant_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output `.fsle` or `.csv` file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// Folder of `patient_sequence_frame.png` files.
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 4)]
    grid: usize,
    /// `auto` or `cx,cy,r` in pixels.
    #[arg(long, default_value = "auto")]
    circle: String,
    /// CSV with columns patient_id,sequence_id,label [default: <images>/labels.csv]
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Write this many augmented copies of every frame instead of the frames themselves.
    #[arg(long, default_value_t = 0)]
    augment: usize,
    /// Augmentation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExecArgs {
    /// Run every loop on the calling thread.
    #[arg(long)]
    sequential: bool,
}

impl ExecArgs {
    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory searched recursively for report JSONs.
    #[arg(long)]
    runs: PathBuf,
    /// Output table; PCA files are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Dataset to project onto its two leading principal components (repeatable).
    #[arg(long = "data")]
    data: Vec<PathBuf>,
}

/// An error with the file or step it concerns.
struct Failure {
    context: String,
    error: FslError,
}

trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T> Context<T> for Result<T, FslError> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|error| Failure { context: what(), error })
    }
}

fn at(path: &Path) -> impl FnOnce() -> String + '_ {
    move || path.display().to_string()
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        num_patients: args.patients,
        frames_per_patient_per_class: args.frames,
        dim: args.dim,
        class_separation: args.sep,
        patient_sigma: args.psigma,
        noise_sigma: args.nsigma,
        malignant_patient_fraction: args.malignant_fraction,
    };
    let ds = synth_dataset(&spec, args.seed).context(|| "synth".into())?;
    save_dataset(&args.out, &ds).context(at(&args.out))?;
    println!("wrote {} records ({} patients, dim {}) to {}", ds.len(), spec.num_patients, ds.dim, args.out.display());
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<(), Failure> {
    let circle: CircleSpec = args.circle.parse().context(|| "--circle".into())?;
    let frames = imageprep::scan_frames(&args.images).context(at(&args.images))?;
    let labels_path = args.labels.unwrap_or_else(|| args.images.join("labels.csv"));
    let labels = imageprep::read_labels(&labels_path).context(at(&labels_path))?;
    let settings = EmbedSettings {
        circle,
        grid: args.grid,
        augment_copies: args.augment,
        policy: AugmentPolicy::default(),
        seed: args.seed,
    };
    let name = args.out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let ds =
        imageprep::embed_frames(&name, &frames, &labels, &settings, Execution::Parallel).context(at(&args.images))?;
    save_dataset(&args.out, &ds).context(at(&args.out))?;
    println!("wrote {} records (dim {}) to {}", ds.len(), ds.dim, args.out.display());
    Ok(())
}

fn print_summary(cfg: &ExperimentConfig, reports: &[fsl_core::episodic::RunReport], out: &Path) {
    print!("{}", summary_csv(&summarize(&cfg.heads, reports)));
    println!("{} reports written to {}", reports.len(), out.display());
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(&args.config).context(at(&args.config))?;
    let reports = experiment::run_experiment(&cfg, &args.out, args.exec.execution()).context(|| "run".into())?;
    print_summary(&cfg, &reports, &args.out);
    Ok(())
}

fn transfer(args: TransferArgs) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(&args.config).context(at(&args.config))?;
    let train = load_dataset(&args.train_data).context(at(&args.train_data))?;
    let eval = load_dataset(&args.eval_data).context(at(&args.eval_data))?;
    let reports = experiment::run_transfer(&cfg, &train, &eval, &args.out, args.exec.execution())
        .context(|| "transfer".into())?;
    print_summary(&cfg, &reports, &args.out);
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let datasets = args.data.iter().map(|p| load_dataset(p).context(at(p))).collect::<Result<Vec<_>, _>>()?;
    let rows = experiment::write_report(&args.runs, &args.out, &datasets).context(at(&args.runs))?;
    println!("{} groups written to {}", rows.len(), args.out.display());
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("FSL_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.trim().parse().map_err(|_| Failure {
        context: "FSL_THREADS".into(),
        error: FslError::InvalidConfig(format!("`{value}` is not a thread count")),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure { context: "FSL_THREADS".into(), error: FslError::InvalidConfig(e.to_string()) })
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Io => 3,
        ErrorKind::Infeasible => 4,
        ErrorKind::Math => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Embed(a) => embed(a),
        Command::Run(a) => run(a),
        Command::Transfer(a) => transfer(a),
        Command::Report(a) => report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { context, error }) => {
            eprintln!("error: {context}: {error}");
            ExitCode::from(exit_code(error.kind()))
        }
    }
}
