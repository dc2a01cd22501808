use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use fsgme::bench::{default_threads, run_benchmark, to_csv, write_csv, Algorithm, BenchConfig, Distribution};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DistributionArg {
    Uniform,
    Skewed,
}

/// Throughput sweep of the group lock against a ticket-lock baseline.
#[derive(Debug, Parser)]
#[command(name = "bench", version)]
struct Args {
    /// Comma-separated algorithms: fs-gme, fs-gme-dsm, me-baseline.
    #[arg(long, value_delimiter = ',', default_value = "fs-gme,me-baseline")]
    algorithm: Vec<String>,
    /// Comma-separated thread counts. Defaults to 1,2,4,8,16,32,48 capped
    /// at the machine's parallelism.
    #[arg(long, value_delimiter = ',')]
    threads: Vec<usize>,
    /// Comma-separated session counts.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    sessions: Vec<u64>,
    #[arg(long, value_enum, default_value = "uniform")]
    distribution: DistributionArg,
    /// Probability of drawing one of the two hot sessions (skewed only).
    #[arg(long, default_value_t = 0.9)]
    hot: f64,
    /// Share of the hot mass that goes to the first hot session.
    #[arg(long, default_value_t = 0.5)]
    hot_split: f64,
    /// Seconds per run, warmup included.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    /// Seconds at the start of each run that are not counted.
    #[arg(long, default_value_t = 0.5)]
    warmup: f64,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output file; a `.meta` file with run parameters is written next to it.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Record enter/exit events on every run and check mutual exclusion.
    #[arg(long)]
    verify: bool,
    /// Pin each worker thread to one CPU.
    #[arg(long)]
    pin: bool,
}

fn seconds(s: f64, what: &str) -> Result<Duration, String> {
    Duration::try_from_secs_f64(s).map_err(|_| format!("invalid {what}: {s}"))
}

fn config(args: &Args) -> Result<BenchConfig, String> {
    let algorithms = args
        .algorithm
        .iter()
        .map(|a| a.parse::<Algorithm>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let distribution = match args.distribution {
        DistributionArg::Uniform => Distribution::Uniform,
        DistributionArg::Skewed => Distribution::Skewed { p_hot: args.hot, split: args.hot_split },
    };
    Ok(BenchConfig {
        threads: if args.threads.is_empty() { default_threads() } else { args.threads.clone() },
        sessions: args.sessions.clone(),
        distribution,
        duration: seconds(args.duration, "duration")?,
        warmup: seconds(args.warmup, "warmup")?,
        runs: args.runs,
        seed: args.seed,
        algorithms,
        verify: args.verify,
        pin: args.pin,
    })
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("bench: {e}");
            return ExitCode::from(2);
        }
    };
    let report = match run_benchmark(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("bench: {e}");
            return ExitCode::from(2);
        }
    };
    print!("{}", to_csv(&report));
    if let Some(path) = &args.csv {
        if let Err(e) = write_csv(&report, &cfg, path) {
            eprintln!("bench: {e}");
            return ExitCode::from(2);
        }
    }
    if cfg.verify {
        for f in &report.failures {
            eprintln!("bench: {f}");
        }
        eprintln!("bench: {} runs verified, {} failed", report.verified_runs, report.failures.len());
        if !report.failures.is_empty() {
            return ExitCode::FAILURE;
        }
    }
    ExitCode::SUCCESS
}
