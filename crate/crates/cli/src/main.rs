//! `forgecast` command-line interface.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use forgecast::evaluation::{build_table, read_runs_csv, DEFAULT_ALPHA};
use forgecast::harness::{run_experiment, ExperimentConfig};
use forgecast::synthgen::{generate, DgpConfig, DgpKind, DEFAULT_LENGTH, DEFAULT_NOISE_SD};

#[derive(Debug, Parser)]
#[command(name = "forgecast", version, about = "Learned forgetting mechanisms for forecasting under distribution shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one synthetic series to CSV (columns t, y, theta_t, regime).
    Gen {
        #[arg(long)]
        kind: DgpKind,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LENGTH)]
        length: usize,
        #[arg(long, default_value_t = DEFAULT_NOISE_SD)]
        noise_sd: f64,
    },
    /// Rebuild the result table from a runs.csv file.
    Table {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> forgecast::Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let exp = run_experiment(&cfg)?;
            for w in &exp.warnings {
                eprintln!("{w}");
            }
            print!("{}", exp.table.to_text());
            println!("results written to {}", cfg.output_dir.display());
        }
        Command::Gen {
            kind,
            seed,
            out,
            length,
            noise_sd,
        } => {
            let series = generate(&DgpConfig { kind, length, noise_sd }, seed)?;
            let mut w = BufWriter::new(File::create(&out)?);
            series.write_csv(&mut w)?;
            w.flush()?;
        }
        Command::Table { runs, alpha, csv } => {
            let results = read_runs_csv(&runs)?;
            let table = build_table(&results, alpha)?;
            if let Some(path) = csv {
                table.write_csv(BufWriter::new(File::create(path)?))?;
            }
            io::stdout().write_all(table.to_text().as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
