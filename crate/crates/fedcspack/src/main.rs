use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedcspack::config::parse_grid;
use fedcspack::runner::format_sweep_table;
use fedcspack::{partition_report, run, sweep, write_idx, ConfigDoc, RunOptions};

#[derive(Parser)]
#[command(
    name = "fedcspack",
    version,
    about = "Federated package-sharing simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `dotted.key=value`, applied in order. Values are parsed as JSON when possible.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Write 0 for wall_ms so repeated runs export identical files.
        #[arg(long)]
        no_wall_clock: bool,
    },
    /// Print per-client label histograms of the configured partition.
    PartitionReport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the cartesian product of one or more grids.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `key=v1,v2,...`; repeat for more axes.
        #[arg(long, required = true, value_name = "KEY=V1,V2,...")]
        grid: Vec<String>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
        #[arg(long)]
        no_wall_clock: bool,
    },
    /// Write the configured dataset as an IDX image/label pair.
    ExportIdx {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
}

fn load(config: &Path, overrides: &[String]) -> Result<ConfigDoc> {
    let mut doc = ConfigDoc::load(config)?;
    doc.apply_overrides(overrides)?;
    Ok(doc)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            overrides,
            out,
            no_wall_clock,
        } => {
            let doc = load(&config, &overrides)?;
            let res = run(
                &doc,
                &out,
                RunOptions {
                    wall_clock: !no_wall_clock,
                },
            )
            .with_context(|| format!("run {}", config.display()))?;
            if let Some(s) = res.summary {
                println!(
                    "{}: {} rounds, final global acc {:.4}, personalized acc {:.4}, uplink {} B, compression {:.3}x",
                    s.method, s.rounds, s.final_global_acc, s.mean_personalized_acc, s.total_bytes_up, s.compression_vs_dense
                );
            }
            println!("wrote {}", out.display());
        }
        Command::PartitionReport { config, overrides } => {
            print!("{}", partition_report(&load(&config, &overrides)?)?);
        }
        Command::Sweep {
            config,
            grid,
            overrides,
            out,
            no_wall_clock,
        } => {
            let doc = load(&config, &overrides)?;
            let axes = grid
                .iter()
                .map(|g| parse_grid(g))
                .collect::<Result<Vec<_>, _>>()?;
            let cells = sweep(
                &doc,
                &axes,
                &out,
                RunOptions {
                    wall_clock: !no_wall_clock,
                },
            )?;
            print!("{}", format_sweep_table(&axes, &cells));
            println!("wrote {}", out.join("summary.csv").display());
        }
        Command::ExportIdx {
            config,
            images,
            labels,
        } => {
            let doc = ConfigDoc::load(&config)?;
            let cfg = doc.resolve()?;
            let data = doc.dataset(&cfg)?;
            write_idx(&data, &images, &labels)?;
            println!(
                "wrote {} rows to {} and {}",
                data.len(),
                images.display(),
                labels.display()
            );
        }
    }
    Ok(())
}
