use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lazyflow_bench::config::{parse_precision, ReportFormat};
use lazyflow_bench::{emit_report, exit, load_config, run, run_comparison, BuildError, RunError};

#[derive(Parser)]
#[command(
    name = "lazyflow-bench",
    version,
    about = "Run lazyflow benchmark graphs and report counters and timings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the graph described by a TOML config.
    Run {
        config: PathBuf,
        #[arg(long, value_enum)]
        device: Option<OnOff>,
        #[arg(long, value_parser = ["f32", "f64"])]
        precision: Option<String>,
        #[arg(long)]
        iterations: Option<u32>,
        /// Fault on the N-th device kernel dispatch.
        #[arg(long, value_name = "N")]
        fail_at: Option<u64>,
        #[arg(long, value_enum)]
        report: Option<Format>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also run host-only and add host/device ratios.
        #[arg(long)]
        compare: bool,
        /// Record monotonic wall-clock times (makes reports run-dependent).
        #[arg(long)]
        wall_clock: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Run {
        config,
        device,
        precision,
        iterations,
        fail_at,
        report,
        out,
        seed,
        compare,
        wall_clock,
    } = cli.command;

    let mut cfg = match load_config(&config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {}: {e}", config.display());
            return ExitCode::from(exit::CONFIG as u8);
        }
    };
    if let Some(d) = device {
        cfg.device_enabled = matches!(d, OnOff::On);
    }
    if let Some(p) = precision.as_deref().and_then(parse_precision) {
        cfg.precision = p;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(n) = fail_at {
        cfg.failure.at_kernel = Some(n);
        cfg.failure.probability = None;
    }
    if let Some(f) = report {
        cfg.report.format = match f {
            Format::Json => ReportFormat::Json,
            Format::Text => ReportFormat::Text,
        };
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.report.wall_clock |= wall_clock;
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(exit::CONFIG as u8);
    }

    let result = if compare { run_comparison(&cfg) } else { run(&cfg) };
    let report = match result {
        Ok(r) => r,
        Err(RunError::Build(e)) => {
            let kind = match e {
                BuildError::Validation(_) => "invalid config",
                BuildError::Graph(_) => "cannot build graph",
            };
            eprintln!("error: {kind}: {e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit::IO as u8);
        }
    };
    let bytes = emit_report(&report, cfg.report.format);
    let written = match &out {
        Some(path) => std::fs::write(path, &bytes),
        None => std::io::Write::write_all(&mut std::io::stdout().lock(), &bytes),
    };
    if let Err(e) = written {
        eprintln!("error: cannot write report: {e}");
        return ExitCode::from(exit::IO as u8);
    }
    if report.aborted() {
        eprintln!("error: device fault under the abort policy");
        return ExitCode::from(exit::DEVICE_FAULT as u8);
    }
    ExitCode::SUCCESS
}
