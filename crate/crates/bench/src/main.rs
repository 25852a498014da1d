use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use cpoe_bench::config::ExperimentConfig;
use cpoe_bench::dataset::write_csv;
use cpoe_bench::experiment::run_experiment;
use cpoe_bench::model_io::{load_model, predict_csv};
use cpoe_bench::synth::synth_gp_data;

/// Thread count for parallel expert work; defaults to all cores.
const THREADS_ENV: &str = "CPOE_THREADS";

#[derive(Parser)]
#[command(name = "bench", version, about = "CPoE experiments, synthetic data and prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write results.csv, timing.csv and traces.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw a GP sample on the unit cube and write it as CSV.
    Synth {
        /// Kernel config file.
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Predict the rows of a CSV file with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Include the observation noise in the variance.
        #[arg(long)]
        noisy: bool,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}='{v}' is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    match Cli::parse().command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = run_experiment(&cfg)?;
            let failed = s.outcomes.iter().filter(|o| !o.ok()).count();
            println!(
                "config {}: {} runs ({failed} failed) in {:.2}s, harness overhead {:.2}%, results in {}",
                cfg.hash,
                s.outcomes.len(),
                s.total_secs,
                100.0 * s.overhead_fraction(),
                s.output.display()
            );
        }
        Command::Synth {
            kernel,
            n,
            d,
            seed,
            output,
        } => {
            let text = std::fs::read_to_string(&kernel).with_context(|| format!("reading {}", kernel.display()))?;
            let params = cpoe::kernels::parse_kernel_config(&text).with_context(|| format!("parsing {}", kernel.display()))?;
            let (x, y) = synth_gp_data(&params, n, d, seed)?;
            let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
            header.push("y".into());
            let rows = (0..n).map(|i| {
                let mut r: Vec<f64> = x.row(i).iter().copied().collect();
                r.push(y[i]);
                r
            });
            write_csv(output.as_deref(), &header, rows)?;
        }
        Command::Predict {
            model,
            input,
            output,
            noisy,
        } => {
            let m = load_model(&model)?;
            let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            predict_csv(&m, &text, output.as_deref(), noisy)?;
        }
    }
    Ok(())
}
