use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};

use noisycl::data::NoiseKind;
use noisycl::harness::report;
use noisycl::harness::{run_experiment, write_run_dir, RunConfig};

#[derive(Parser)]
#[command(name = "noisycl", version, about = "Continual learning on noisy-label streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured seed and write a results directory.
    Run {
        /// Configuration file; defaults apply to every missing key.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Replace the configured seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Replace the configured output directory.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run one directory per noise kind and rate.
    Sweep {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "symmetric")]
        kinds: Vec<NoiseKind>,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4")]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Aggregate run directories into summary.csv / summary.json.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write accuracy and loss-histogram SVGs.
        #[arg(long)]
        plots: bool,
    },
    /// Print the default configuration.
    DumpConfig {
        /// Print the blob-dataset defaults instead of MNIST.
        #[arg(long)]
        blobs: bool,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn execute(cfg: &RunConfig) -> anyhow::Result<()> {
    cfg.validate()?;
    let started = Instant::now();
    log::info!(
        "running {} seed(s) into {}",
        cfg.run.seeds.len(),
        cfg.run.output_dir.display()
    );
    let outcomes = run_experiment(cfg)?;
    let metrics = write_run_dir(
        &cfg.run.output_dir,
        cfg,
        &outcomes,
        started.elapsed().as_secs_f64(),
    )?;
    for s in &metrics.seeds {
        println!("seed {:>3}  overall {:6.2}%", s.seed, s.overall_acc);
    }
    println!(
        "mean overall accuracy {:.2}%  ({})",
        metrics.mean_overall_acc,
        cfg.run.output_dir.display()
    );
    Ok(())
}

fn main_inner(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, seeds, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if !seeds.is_empty() {
                cfg.run.seeds = seeds;
            }
            if let Some(out) = out {
                cfg.run.output_dir = out;
            }
            execute(&cfg)
        }
        Command::Sweep {
            config,
            kinds,
            rates,
            seeds,
            out,
        } => {
            let base = load_config(config.as_deref())?;
            for kind in &kinds {
                for &rate in &rates {
                    let mut cfg = base.clone();
                    cfg.noise.kind = *kind;
                    cfg.noise.rate = rate;
                    if !seeds.is_empty() {
                        cfg.run.seeds = seeds.clone();
                    }
                    cfg.run.output_dir = out.join(format!("{kind}_{rate}"));
                    execute(&cfg).with_context(|| format!("sweep cell {kind} {rate}"))?;
                }
            }
            Ok(())
        }
        Command::Report { runs, out, plots } => {
            let summaries = runs
                .iter()
                .map(|dir| report::summarize(dir))
                .collect::<Result<Vec<_>, _>>()?;
            report::write_summary(&out, &summaries)?;
            for s in &summaries {
                println!(
                    "{:<24} {:>10} {:>5} {:7.2}% ± {:.2}",
                    s.run, s.noise_kind, s.noise_rate, s.mean_overall_acc, s.std_overall_acc
                );
            }
            if plots {
                for dir in &runs {
                    for path in report::plot_run(dir, &out)? {
                        println!("wrote {}", path.display());
                    }
                }
            }
            Ok(())
        }
        Command::DumpConfig { blobs } => {
            let cfg = if blobs {
                RunConfig::blobs()
            } else {
                RunConfig::default()
            };
            print!("{}", cfg.resolved());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
