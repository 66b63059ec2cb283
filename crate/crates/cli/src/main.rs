use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use srsq_core::experiment::{emit_figure, run_experiment, write_outputs, ExperimentConfig, Figure};
use srsq_core::population::{generate_synthetic, pearson, SyntheticSpec, Variable};

#[derive(Parser)]
#[command(
    name = "srsq",
    version,
    about = "Site-recruitment simulation: SRS vs SRS with quotas"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population CSV from a JSON spec.
    GenPop { spec: PathBuf, out: PathBuf },
    /// Run the SRS/SRSQ experiment described by a JSON config.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replications: Option<usize>,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-replication trace.jsonl.
        #[arg(long)]
        trace: bool,
    },
    /// Emit plot data for one figure from a results directory.
    Report {
        results_dir: PathBuf,
        #[arg(long, value_parser = parse_figure)]
        figure: Figure,
    },
}

fn parse_figure(s: &str) -> Result<Figure, String> {
    s.parse().map_err(|_| {
        let names: Vec<_> = Figure::ALL.iter().map(|f| f.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn gen_pop(spec_path: &Path, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = serde_json::from_reader(
        File::open(spec_path).with_context(|| format!("opening {}", spec_path.display()))?,
    )
    .with_context(|| format!("parsing {}", spec_path.display()))?;
    let frame = generate_synthetic(&spec)?;
    let mut w =
        BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    frame.write_csv(&mut w)?;
    w.flush()?;

    let cols: Vec<Vec<f64>> = Variable::ALL.iter().map(|&v| frame.raw_column(v)).collect();
    println!("N = {}", frame.len());
    println!("{:<8}{:>14}{:>14}", "var", "mean", "sd");
    for (v, col) in Variable::ALL.iter().zip(&cols) {
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        println!("{:<8}{:>14.4}{:>14.4}", v.column(), mean, sd);
    }
    println!("correlation");
    for (v, x) in Variable::ALL.iter().zip(&cols) {
        let row: Vec<String> = cols
            .iter()
            .map(|y| format!("{:>9.4}", pearson(x, y)))
            .collect();
        println!("{:<8}{}", v.column(), row.join(""));
    }
    Ok(())
}

fn simulate(
    config: &Path,
    seed: Option<u64>,
    replications: Option<usize>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    trace: bool,
) -> Result<()> {
    let mut cfg = ExperimentConfig::from_file(config)
        .with_context(|| format!("reading config {}", config.display()))?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(r) = replications {
        cfg.replications = r;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.trace |= trace;

    let results = run_experiment(&cfg, jobs)?;
    for s in &results.skipped {
        eprintln!(
            "warning: skipped {} (N={}): {}",
            s.population, s.size, s.reason
        );
    }
    write_outputs(&results, &cfg.output_dir)
        .with_context(|| format!("writing results to {}", cfg.output_dir.display()))?;

    for pop in &results.populations {
        let flag = if pop.feasible {
            ""
        } else {
            "  [below feasibility threshold]"
        };
        println!("== {} (N={}){}", pop.population, pop.size, flag);
        println!("{}", pop.averaged.to_table());
    }
    println!("results written to {}", cfg.output_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPop { spec, out } => gen_pop(&spec, &out),
        Command::Simulate {
            config,
            seed,
            replications,
            jobs,
            out,
            trace,
        } => simulate(&config, seed, replications, jobs, out, trace),
        Command::Report {
            results_dir,
            figure,
        } => {
            let path = emit_figure(&results_dir, figure)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
