use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sddlab::detector::detect_with_smoothing;
use sddlab::harness::{
    export_histogram, read_csv_column, render_report, resume, run_experiment, sweep_lambda,
    ExperimentConfig, RunOptions, RunStatus, SweepOptions,
};

/// Train small vision transformers under label noise, prune them
/// iteratively, and characterize sparse double descent.
///
/// Exit codes: 0 success; 2 sparse double descent detected (detect/report);
/// 3 runtime error; 64 usage error.
#[derive(Parser)]
#[command(name = "sddlab", version, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigOverrides {
    /// Experiment config (JSON)
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory (default: config out_dir, else runs/<run_id>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the label-noise fraction ε
    #[arg(long)]
    epsilon: Option<f64>,
    /// Override the ℓ2 weight λ
    #[arg(long)]
    lambda: Option<f64>,
    /// Override epochs per training round
    #[arg(long)]
    epochs: Option<usize>,
    /// Override ζ_iter (fraction pruned per round)
    #[arg(long)]
    zeta_iter: Option<f64>,
    /// Override ζ_end (terminal sparsity)
    #[arg(long)]
    zeta_end: Option<f64>,
    /// Override the detector tolerance δ
    #[arg(long)]
    delta: Option<f64>,
    /// Deterministic mode (always honored; recorded in the manifest)
    #[arg(long, default_value_t = true)]
    deterministic: bool,
    /// Suppress per-iteration progress lines
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment: dense train, then prune/retrain to ζ_end
    Run(ConfigOverrides),
    /// Continue an interrupted run from its last completed iteration
    Resume {
        /// Run directory containing manifest.json
        #[arg(short, long)]
        dir: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Run one experiment per λ value (shared data and noise seed)
    Sweep {
        #[command(flatten)]
        overrides: ConfigOverrides,
        /// Comma-separated λ values, e.g. 0.03,1,3
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        /// Concurrent runs (each run itself stays deterministic)
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Classify a CSV curve; exit code 2 when SDD is detected
    Detect {
        /// CSV file (metrics.csv or any file with the column; bare
        /// single-column numeric files work too)
        #[arg(short, long)]
        input: PathBuf,
        /// Column holding the performance values
        #[arg(long, default_value = "val_acc")]
        column: String,
        /// Tolerance δ: |Δp| ≤ δ counts as flat
        #[arg(long, default_value_t = 0.005)]
        delta: f64,
        /// Centered moving-average window (1 = off)
        #[arg(long, default_value_t = 1)]
        smooth: usize,
    },
    /// Histogram of surviving weights in a checkpoint
    Hist {
        #[arg(short = 'k', long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 101)]
        bins: usize,
        #[arg(long, default_value_t = -0.3, allow_hyphen_values = true)]
        min: f64,
        #[arg(long, default_value_t = 0.3)]
        max: f64,
        /// Write the bin table as CSV here (stdout summary regardless)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a run or sweep directory; exit code 2 when SDD was detected
    Report {
        #[arg(short, long)]
        dir: PathBuf,
    },
}

fn load_config(overrides: &ConfigOverrides) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(&overrides.config)
        .map_err(|e| format!("cannot read {}: {e}", overrides.config.display()))?;
    let mut config = ExperimentConfig::from_json(&text)
        .map_err(|e| format!("cannot parse {}: {e}", overrides.config.display()))?;
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(epsilon) = overrides.epsilon {
        config.noise.epsilon = epsilon;
    }
    if let Some(lambda) = overrides.lambda {
        config.train.lambda = lambda;
    }
    if let Some(epochs) = overrides.epochs {
        config.train.epochs = epochs;
    }
    if let Some(z) = overrides.zeta_iter {
        config.prune.zeta_iter = z;
    }
    if let Some(z) = overrides.zeta_end {
        config.prune.zeta_end = z;
    }
    if let Some(d) = overrides.delta {
        config.detect.delta = d;
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn default_out_dir(config: &ExperimentConfig, prefix: &str) -> PathBuf {
    config.out_dir.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!("{prefix}{}-s{}", &config.hash()[..12], config.seed))
    })
}

fn run_main() -> Result<u8, String> {
    let cli = Cli::try_parse().map_err(|e| {
        // clap's exit code 2 would collide with "SDD detected"
        let _ = e.print();
        String::new()
    })?;

    match cli.command {
        Command::Run(overrides) => {
            let config = load_config(&overrides)?;
            let out = overrides.out.clone().unwrap_or_else(|| default_out_dir(&config, ""));
            let opts = RunOptions {
                out_dir: out.clone(),
                deterministic: overrides.deterministic,
                quiet: overrides.quiet,
                abort_after_iterations: None,
            };
            let record = run_experiment(&config, &opts).map_err(|e| e.to_string())?;
            println!("run {} finished: {:?}", record.manifest.run_id, record.manifest.status);
            println!("artifacts in {}", out.display());
            if let Some(v) = &record.verdict {
                println!("sdd: {}", if v.sdd { "TRUE" } else { "false" });
            }
            Ok(0)
        }
        Command::Resume { dir, quiet } => {
            let record = resume(&dir, quiet).map_err(|e| e.to_string())?;
            println!("run {} now: {:?}", record.manifest.run_id, record.manifest.status);
            if record.manifest.status != RunStatus::Completed {
                return Ok(3);
            }
            Ok(0)
        }
        Command::Sweep { overrides, lambdas, jobs } => {
            let config = load_config(&overrides)?;
            let out = overrides.out.clone().unwrap_or_else(|| default_out_dir(&config, "sweep-"));
            let opts = SweepOptions {
                out_dir: out.clone(),
                jobs,
                quiet: overrides.quiet,
                deterministic: overrides.deterministic,
            };
            let record = sweep_lambda(&config, &lambdas, &opts).map_err(|e| e.to_string())?;
            for cell in &record.cells {
                println!(
                    "lambda {}: {} sdd={} bump={}",
                    cell.lambda,
                    cell.status,
                    cell.sdd.map_or("-".into(), |b| b.to_string()),
                    cell.bump_val_loss.map_or("-".into(), |b| format!("{b:.6}")),
                );
            }
            println!("sweep artifacts in {}", out.display());
            Ok(0)
        }
        Command::Detect { input, column, delta, smooth } => {
            let values = read_csv_column(&input, &column).map_err(|e| e.to_string())?;
            if values.is_empty() {
                return Err(format!("{}: no data points", input.display()));
            }
            let verdict = detect_with_smoothing(&values, delta, smooth);
            println!("{}", serde_json::to_string_pretty(&verdict).expect("serializable"));
            Ok(if verdict.sdd { 2 } else { 0 })
        }
        Command::Hist { checkpoint, bins, min, max, out } => {
            let hist = export_histogram(&checkpoint, bins, min, max).map_err(|e| e.to_string())?;
            println!(
                "survivors: {}\nmean: {}\nvariance: {}",
                hist.survivors, hist.mean, hist.variance
            );
            if let Some(path) = out {
                std::fs::write(&path, hist.to_csv())
                    .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
                println!("bin table written to {}", path.display());
            } else {
                print!("{}", hist.to_csv());
            }
            Ok(0)
        }
        Command::Report { dir } => {
            let (text, sdd) = render_report(&dir).map_err(|e| e.to_string())?;
            print!("{text}");
            Ok(if sdd { 2 } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    match run_main() {
        Ok(code) => ExitCode::from(code),
        Err(msg) if msg.is_empty() => ExitCode::from(64),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
