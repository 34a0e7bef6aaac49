use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use star_cf::net_config::ConfigFile;
use star_cf::sweep::{emit, emit_artifacts, run_sweep, Format, SweepSpec};
use star_cf::{Error, Result};

/// Run a parameter sweep and write one row per (variant, sweep value).
#[derive(Debug, Parser)]
#[command(name = "simulate", version)]
struct Args {
    /// Sweep specification (JSON).
    spec: PathBuf,
    /// System and geometry configuration (JSON); defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; falls back to the `out` field of the spec.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads (0 picks the number of cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Overrides the seeds of the spec and the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for per-point surface configurations and optimizer traces.
    #[arg(long)]
    artifacts: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn run(args: Args) -> Result<()> {
    let spec = SweepSpec::from_json(&read(&args.spec)?).map_err(|e| e.with_context("sweep spec"))?;
    let file = match &args.config {
        Some(p) => ConfigFile::from_json(&read(p)?).map_err(|e| e.with_context("config"))?,
        None => ConfigFile::default(),
    };
    let out = args
        .out
        .clone()
        .or_else(|| spec.out.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no output path: pass --out or set \"out\" in the spec".into()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let result = pool.install(|| run_sweep(&spec, &file, args.seed))?;
    emit(&result.rows(), args.format, &out)?;
    if let Some(dir) = &args.artifacts {
        emit_artifacts(&result, dir)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let obj = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{obj}");
            ExitCode::from(1)
        }
    }
}
