use std::fs;
use std::io::{self as stdio, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cdrec::config::{RunConfig, DATA_ROOT_ENV};
use cdrec::harness::{self, RunPaths};
use cdrec::io;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cdrec", version, about = "Consistency-trained discrete diffusion recommender")]
struct Cli {
    /// TOML configuration file providing defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lambda1=0.4`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Data root containing the ratings file.
    #[arg(long, env = DATA_ROOT_ENV, global = true)]
    data_root: Option<PathBuf>,
    /// Run directory receiving all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest the ratings file and write the chronological split.
    Prepare,
    /// Load external embeddings or train the fallback matrix factorization.
    Embed {
        /// Embedding file to load instead of training.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Train the denoiser.
    Train,
    /// Evaluate a trained model on the test split.
    Eval {
        /// Checkpoint to evaluate (defaults to the run's model.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated evaluation seeds; several are averaged.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Write per-run wall times as CSV.
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Emit top-K recommendations as JSON lines.
    Recommend {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Users to recommend for (original ids); all users when omitted.
        #[arg(long = "user")]
        users: Vec<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Output file (stdout when omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and evaluate over a grid, e.g. `--grid sampler.steps=1,3,10`.
    Sweep {
        #[arg(long = "grid", required = true)]
        axes: Vec<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a forward-process trace of one user as CSV.
    Trace {
        #[arg(long)]
        user: String,
        /// Number of evenly spaced times over [0, T].
        #[arg(long, default_value_t = 61)]
        steps: usize,
        /// Trajectories used for the popularity correlation summary.
        #[arg(long, default_value_t = 1000)]
        runs: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(out) = &cli.out {
        overrides.push(format!("paths.out_dir={}", toml_string(out)));
    }
    overrides.extend(cli.overrides.iter().cloned());
    let root = cli.data_root.as_ref().map(|p| p.display().to_string());
    RunConfig::load(cli.config.as_deref(), root.as_deref(), &overrides)
}

fn toml_string(p: &std::path::Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn load_model(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(RunConfig, cdrec_core::Denoiser)> {
    let path = checkpoint.unwrap_or_else(|| RunPaths::new(cfg).model());
    let ckpt = io::load_checkpoint(&path)?;
    if ckpt.config.denoiser != cfg.denoiser {
        log::warn!("checkpoint denoiser settings differ from the configuration; using the checkpoint's");
    }
    let mut cfg = cfg.clone();
    cfg.denoiser = ckpt.config.denoiser.clone();
    let model = harness::model_from_checkpoint(&ckpt)?;
    Ok((cfg, model))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Prepare => {
            let stats = harness::prepare(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Embed { from } => {
            if from.is_some() {
                cfg.collab.embeddings = from;
            }
            let b = harness::embed(&cfg)?;
            println!("{} users x {} items x {} ({:?})", b.n_users, b.n_items, b.dim, b.source);
        }
        Command::Train => {
            let summary = harness::train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval { checkpoint, seeds, timing } => {
            if !seeds.is_empty() {
                cfg.eval.seeds = seeds;
            }
            let (cfg, model) = load_model(&cfg, checkpoint)?;
            let (report, rows) = harness::evaluate(&cfg, &model)?;
            if let Some(path) = timing {
                harness::write_timing_csv(&path, &rows)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Recommend { checkpoint, users, k, output } => {
            let (cfg, model) = load_model(&cfg, checkpoint)?;
            let n = match output {
                Some(path) => {
                    let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
                    let n = harness::recommend(&cfg, &model, &users, k, &mut w)?;
                    w.flush()?;
                    n
                }
                None => {
                    let mut w = stdio::stdout().lock();
                    harness::recommend(&cfg, &model, &users, k, &mut w)?
                }
            };
            log::info!("wrote {n} recommendation lines");
        }
        Command::Sweep { axes, output } => {
            let axes = axes.iter().map(|a| harness::parse_axis(a)).collect::<Result<Vec<_>>>()?;
            let rows = harness::sweep(&cfg, &axes)?;
            let path = output.unwrap_or_else(|| cfg.paths.out_dir.join("sweep.csv"));
            harness::write_sweep_csv(&path, &cfg.eval.ks, &rows)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} grid points, {failed} failed; table in {}", rows.len(), path.display());
        }
        Command::Trace { user, steps, runs, output } => {
            let path = output.unwrap_or_else(|| cfg.paths.out_dir.join(format!("trace_{user}.csv")));
            let rho = harness::trace(&cfg, &user, steps, runs, &path)?;
            println!("{{\"trace\": {:?}, \"spearman\": {rho}}}", path.display().to_string());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
