//! Command-line front end: pretraining, evaluation sweeps, diagnostics,
//! plotting and the built-in self test.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical failure, 1 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mamba_icl::config::OUT_DIR_ENV;
use mamba_icl::experiment::{
    pretrain_diagnostics, read_results, results_to_string, run_diagnose, run_pretrain, run_sweep,
    sweep_diagnostics, write_file, write_manifest, write_report,
};
use mamba_icl::{Checkpoint, Error, ExperimentConfig, ModelKind, Result};

#[derive(Parser)]
#[command(
    name = "mamba-icl",
    version,
    about = "In-context learning of single-index models with a selective SSM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run both training stages and write a checkpoint plus a run manifest.
    Pretrain(RunArgs),
    /// Evaluate the trained model and baselines over the context-length grid.
    Sweep(RunArgs),
    /// Feature fit, alignment, exponent reduction and the gamma* oracle.
    Diagnose(RunArgs),
    /// Render a sweep CSV as an SVG line chart.
    Plot {
        /// Sweep result file.
        csv: PathBuf,
        /// Directory for the SVG (default: next to the CSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML). Without it the desk-scale default is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write (pretrain) or read (sweep, diagnose).
    /// Default: `checkpoint.toml` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory; overrides the config and the environment.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed; overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

struct Run {
    cfg: ExperimentConfig,
    out_dir: PathBuf,
    checkpoint: PathBuf,
    workers: usize,
}

impl RunArgs {
    fn resolve(&self) -> Result<Run> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed)?;
        }
        let out_dir = self
            .out
            .clone()
            .or_else(|| {
                std::env::var_os(OUT_DIR_ENV)
                    .filter(|v| !v.is_empty())
                    .map(PathBuf::from)
            })
            .unwrap_or_else(|| cfg.out_dir.clone());
        let checkpoint = self
            .checkpoint
            .clone()
            .unwrap_or_else(|| out_dir.join("checkpoint.toml"));
        let workers = match self.workers {
            Some(0) => return Err(Error::invalid("--workers must be at least 1")),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(Run {
            cfg,
            out_dir,
            checkpoint,
            workers,
        })
    }
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {workers} workers: {e}")))?;
    pool.install(f)
}

fn pretrain(args: &RunArgs) -> Result<()> {
    let run = args.resolve()?;
    let start = Instant::now();
    let out = with_workers(run.workers, || run_pretrain(&run.cfg))?;
    let wall = start.elapsed().as_secs_f64();
    let ck = Checkpoint::from_run(&run.cfg, &out);
    ck.save(&run.checkpoint)?;
    let manifest = run.out_dir.join("pretrain_manifest.toml");
    write_manifest(
        &manifest,
        "pretrain",
        &run.cfg,
        run.workers,
        wall,
        pretrain_diagnostics(&out),
    )?;
    println!("checkpoint: {}", run.checkpoint.display());
    println!("manifest:   {}", manifest.display());
    println!(
        "eta {:.4e}, stage I active rate {:.3}, lambda2 {}, stage II KKT residual {:.2e}",
        out.stage1.eta, out.stage1.active_rate, out.stage2.chosen_lambda2, out.stage2.kkt_residual
    );
    Ok(())
}

fn sweep(args: &RunArgs) -> Result<()> {
    let run = args.resolve()?;
    let ck = if run.cfg.eval.models.contains(&ModelKind::MambaMlp) {
        Some(Checkpoint::load(&run.checkpoint)?)
    } else {
        None
    };
    let start = Instant::now();
    let rows = with_workers(run.workers, || run_sweep(&run.cfg, ck.as_ref()))?;
    let wall = start.elapsed().as_secs_f64();
    let csv = run.out_dir.join("sweep.csv");
    write_file(&csv, results_to_string(&rows)?.as_bytes())?;
    let manifest = run.out_dir.join("sweep_manifest.toml");
    let diag = sweep_diagnostics(&rows, ck.as_ref().map(|_| run.checkpoint.as_path()));
    write_manifest(&manifest, "sweep", &run.cfg, run.workers, wall, diag)?;
    println!("results:  {} ({} rows)", csv.display(), rows.len());
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn diagnose(args: &RunArgs) -> Result<()> {
    let run = args.resolve()?;
    let ck = Checkpoint::load(&run.checkpoint)?;
    let diag = with_workers(run.workers, || run_diagnose(&run.cfg, &ck))?;
    let path = run.out_dir.join("diagnostics.csv");
    let mut buf = Vec::new();
    write_report(&mut buf, &diag.records())?;
    write_file(&path, &buf)?;
    println!("report: {}", path.display());
    for c in &diag.checks {
        println!(
            "{:<20} {:>12.6} vs {:<8} {}",
            c.name,
            c.value,
            c.threshold,
            if c.passed { "pass" } else { "fail" }
        );
    }
    Ok(())
}

fn plot(csv: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(csv)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", csv.display())))?;
    let rows = read_results(&text)?;
    let svg = mamba_icl::plot::render_svg(&rows)?;
    let name = csv.with_extension("svg");
    let path = match out {
        Some(dir) => dir.join(name.file_name().unwrap_or_else(|| "sweep.svg".as_ref())),
        None => name,
    };
    write_file(&path, svg.as_bytes())?;
    println!("plot: {}", path.display());
    Ok(())
}

fn selftest() -> Result<()> {
    let checks = mamba_icl::selftest::run_selftest();
    for c in &checks {
        println!(
            "{} {:<40} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "{failed} self-test check(s) failed"
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Sweep(a) => sweep(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Plot { csv, out } => plot(csv, out.as_deref()),
        Command::Selftest => selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
