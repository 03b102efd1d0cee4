use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use viewlab::cli::{self, Context, ExperimentConfig, GridSpec};
use viewlab::{Error, Result};

#[derive(Parser)]
#[command(name = "viewlab", version, about = "Generated views for contrastive learning, at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Config override `path=value`, e.g. `viewgen.perturb.sigma=0.4`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural blob dataset.
    MakeDataset(Common),
    /// Train the inverter and invert every training image.
    Invert(Common),
    /// Generate and cache views (W-perturb or W-search).
    GenViews(Common),
    /// Contrastive pretraining.
    Pretrain(Common),
    /// Linear probe accuracy.
    Probe(Common),
    /// k-NN accuracy.
    Knn(Common),
    /// Mutual information between anchors, expert views and generated views.
    Mi(Common),
    /// SVG of k-NN accuracy curves.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Curve `LABEL=metrics.csv`. Repeatable; defaults to every pretraining run.
        #[arg(long = "metrics", value_name = "LABEL=PATH")]
        metrics: Vec<String>,
        /// Output SVG path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of configurations.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid spec (JSON), or one of the built-in grids `sigma`, `epsilon`, `lambda`.
        #[arg(long)]
        grid: String,
        /// Cells run at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn context(c: &Common) -> Result<Context> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg = cfg.apply_overrides(&c.overrides)?;
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed)?;
    }
    if let Some(out) = &c.output {
        cfg.output_dir = out.clone();
    }
    let mut ctx = Context::new(cfg)?;
    ctx.force = c.force;
    Ok(ctx)
}

fn run(cmd: Command) -> Result<serde_json::Value> {
    let outcome = match cmd {
        Command::MakeDataset(c) => cli::make_dataset_cmd(&context(&c)?)?,
        Command::Invert(c) => cli::invert_cmd(&context(&c)?)?,
        Command::GenViews(c) => cli::gen_views_cmd(&context(&c)?)?,
        Command::Pretrain(c) => cli::pretrain_cmd(&context(&c)?)?,
        Command::Probe(c) => cli::probe_cmd(&context(&c)?)?,
        Command::Knn(c) => cli::knn_cmd(&context(&c)?)?,
        Command::Mi(c) => cli::mi_cmd(&context(&c)?)?,
        Command::Plot { common, metrics, out } => {
            let inputs = metrics
                .iter()
                .map(|m| {
                    m.split_once('=')
                        .map(|(l, p)| (l.to_string(), PathBuf::from(p)))
                        .ok_or_else(|| Error::config(format!("--metrics {m} is not LABEL=PATH")))
                })
                .collect::<Result<Vec<_>>>()?;
            cli::plot_cmd(&context(&common)?, &inputs, out.as_deref())?
        }
        Command::Sweep { common, grid, jobs } => {
            let ctx = context(&common)?;
            let spec = match grid.as_str() {
                "sigma" => GridSpec::sigma(),
                "epsilon" => GridSpec::epsilon(),
                "lambda" => GridSpec::lambda(),
                path => GridSpec::load(path.as_ref())?,
            };
            let (path, rows) = cli::run_sweep(&ctx.config, &spec, jobs)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            return Ok(serde_json::json!({
                "command": "sweep",
                "artifacts": [path],
                "summary": {"cells": rows.len(), "failed": failed},
            }));
        }
    };
    Ok(serde_json::to_value(outcome)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
