use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use upager::bench::churn::{self, ChurnParams};
use upager::bench::{bfs, rmat, sort, Backend, BenchReport, RunSettings, SourceChoice};
use upager::config::{parse_size, ConfigField, RuntimeConfig};

#[derive(Parser)]
#[command(name = "upager-bench", about = "Out-of-core workloads over the demand-paging engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a file of ascending 64-bit words.
    GenSort {
        path: PathBuf,
        /// Total size, e.g. 256M.
        #[arg(long, value_parser = bytes)]
        size: u64,
    },
    /// Sort a word file into descending order in place.
    Sort {
        path: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Write an R-MAT graph in CSR layout.
    GenRmat {
        path: PathBuf,
        #[arg(long, default_value_t = 14)]
        scale: u32,
        #[arg(long, default_value_t = 16)]
        edge_factor: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Breadth-first search over a CSR file.
    Bfs {
        path: PathBuf,
        #[arg(long, default_value_t = 0)]
        source: u64,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Random 64-byte record reads and writes.
    Churn {
        path: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        ops: u64,
        #[arg(long, default_value_t = 100_000)]
        keys: u64,
        #[arg(long, default_value_t = 0.5)]
        read_fraction: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        run: RunFlags,
    },
}

/// Engine flags fall back to the configuration environment variables.
#[derive(Args)]
struct RunFlags {
    #[arg(long, value_parser = bytes)]
    page_size: Option<u64>,
    #[arg(long, value_parser = bytes)]
    buffer_size: Option<u64>,
    #[arg(long)]
    fillers: Option<u64>,
    #[arg(long)]
    evictors: Option<u64>,
    #[arg(long)]
    read_ahead: Option<u64>,
    #[arg(long)]
    high_watermark: Option<u64>,
    #[arg(long)]
    low_watermark: Option<u64>,
    /// Application threads.
    #[arg(long, default_value_t = 4)]
    threads: usize,
    #[arg(long, default_value = "engine")]
    backend: Backend,
    /// sim, kernel or auto.
    #[arg(long, default_value = "auto")]
    fault_source: SourceChoice,
    /// Append the report as a JSON line to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn bytes(s: &str) -> Result<u64, String> {
    parse_size("size", s).map(|n| n as u64).map_err(|e| e.to_string())
}

impl RunFlags {
    fn settings(&self) -> Result<RunSettings, String> {
        let base = RuntimeConfig::from_process_env().map_err(|e| e.to_string())?;
        let overrides: Vec<(ConfigField, u64)> = [
            (ConfigField::BufferCapacity, self.buffer_size),
            (ConfigField::PageSize, self.page_size),
            (ConfigField::Fillers, self.fillers),
            (ConfigField::Evictors, self.evictors),
            (ConfigField::ReadAhead, self.read_ahead),
            (ConfigField::HighWatermark, self.high_watermark),
            (ConfigField::LowWatermark, self.low_watermark),
        ]
        .into_iter()
        .filter_map(|(f, v)| v.map(|v| (f, v)))
        .collect();
        let config = base.apply_overrides(&overrides).map_err(|e| e.to_string())?;
        Ok(RunSettings::new(config)
            .threads(self.threads)
            .backend(self.backend)
            .source(self.fault_source))
    }
}

fn emit(report: BenchReport, flags: &RunFlags) -> Result<ExitCode, String> {
    println!("{}", report.to_json_line());
    if let Some(path) = &flags.report {
        report.append_to(path).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    if report.verified {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("verification failed: {}", report.detail.as_deref().unwrap_or("unknown"));
        Ok(ExitCode::FAILURE)
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    let err = |e: upager::bench::BenchError| e.to_string();
    match cli.command {
        Command::GenSort { path, size } => {
            sort::gen_sort_data(&path, size).map_err(err)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sort { path, run } => {
            let report = sort::run_sort(&path, &run.settings()?).map_err(err)?;
            emit(report, &run)
        }
        Command::GenRmat {
            path,
            scale,
            edge_factor,
            seed,
        } => {
            let g = rmat::gen_rmat_csr(&path, scale, edge_factor, seed).map_err(err)?;
            eprintln!("{} vertices, {} directed edges", g.num_vertices, g.num_edges);
            Ok(ExitCode::SUCCESS)
        }
        Command::Bfs { path, source, run } => {
            let report = bfs::run_bfs(&path, source, &run.settings()?).map_err(err)?;
            emit(report, &run)
        }
        Command::Churn {
            path,
            ops,
            keys,
            read_fraction,
            seed,
            run,
        } => {
            let params = ChurnParams {
                num_ops: ops,
                key_space: keys,
                read_fraction,
                seed,
            };
            let report = churn::run_churn(&path, &params, &run.settings()?).map_err(err)?;
            emit(report, &run)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
