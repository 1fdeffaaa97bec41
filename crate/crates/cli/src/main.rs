//! `wafermesh`: runs benchmark scenarios on the simulated mesh and writes
//! CSV reports.

mod compare;
mod report;
mod runner;
mod scenario;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scenario::{parse_grid, Scenario};

#[derive(Parser)]
#[command(name = "wafermesh", version, about = "Simulate distributed GEMM, GEMV, KV cache and LLM layers on a 2D mesh")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distributed matrix multiplication algorithms.
    Gemm(RunArgs),
    /// Matrix-vector products with different allreduce disciplines.
    Gemv(RunArgs),
    /// KV cache insertion in shift and concat modes.
    Kvcache(RunArgs),
    /// Prefill and decode of a toy transformer against the dense reference.
    Layer(RunArgs),
    /// Search prefill and decode grids for the lowest latency.
    Autotune(RunArgs),
    /// Diff two report CSVs.
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML; a built-in scenario is used without it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: the scenario's `out`, else "reports"].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run a single grid, written NxM.
    #[arg(long)]
    grid: Option<String>,
    /// Comma-separated algorithms (or KV modes).
    #[arg(long, value_delimiter = ',')]
    algo: Option<Vec<String>>,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Compare { a, b } => {
            let ra = read_report(&a)?;
            let rb = read_report(&b)?;
            print!("{}", compare::compare(&ra, &rb));
            return Ok(ExitCode::SUCCESS);
        }
        Command::Gemm(a) => ("gemm", a),
        Command::Gemv(a) => ("gemv", a),
        Command::Kvcache(a) => ("kvcache", a),
        Command::Layer(a) => ("layer", a),
        Command::Autotune(a) => ("autotune", a),
    };
    let mut s = match &args.config {
        Some(path) => Scenario::load(path)?,
        None => Scenario::default_for(kind)?,
    };
    if s.workload.kind() != kind {
        bail!("scenario {} is a {} workload, not {kind}", s.name, s.workload.kind());
    }
    let grid = args.grid.as_deref().map(parse_grid).transpose()?;
    s.override_with(grid, args.algo, args.seed)?;
    s.validate()?;

    let out_dir = args.out.or_else(|| s.out.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("reports"));
    let output = runner::run(&s)?;
    let summary = report::summary_table(&output.rows);
    write_outputs(&out_dir, &s, &output, &summary)?;
    print!("{summary}");

    let failed: Vec<_> = output.failed().collect();
    if failed.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for r in failed {
        eprintln!("correctness check failed: {} {} {} seed {}", r.algorithm, r.grid, r.dims, r.seed);
    }
    Ok(ExitCode::from(2))
}

fn read_report(path: &Path) -> Result<Vec<report::ReportRow>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    report::from_csv(file, &path.display().to_string())
}

fn write_outputs(dir: &Path, s: &Scenario, output: &runner::RunOutput, summary: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let write = |name: &str, contents: &str| {
        let path = dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    };
    write(&format!("{}.csv", s.name), &report::to_csv(&output.rows)?)?;
    write(&format!("{}_summary.txt", s.name), summary)?;
    for a in &output.artifacts {
        write(&a.file, &a.contents)?;
    }
    Ok(())
}
