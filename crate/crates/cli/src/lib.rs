//! Operator surface: `gen`, `train`, `eval` and `sweep` over one TOML run config.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_eval, cmd_gen, cmd_sweep, cmd_train};
pub use config::{EvalObjective, RunConfig, OUT_ENV};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "igcap", about = "Information-gain captioner: data, training and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Output root (overrides the config; the IGCAP_OUT variable overrides both).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Checkpoint directory (default `<out>/model`).
    #[arg(long, global = true)]
    pub model_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus, prompt table and vocabulary.
    Gen,
    /// Train a captioner on the generated corpus.
    Train {
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score the evaluation split and report accuracy, PCC and recalls.
    Eval {
        /// mle, ig:A, zero_image:A or lm_plus_cap[:A]
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        truth_map: Option<PathBuf>,
        #[arg(long)]
        lm_dir: Option<PathBuf>,
        #[arg(long)]
        normalize: bool,
    },
    /// Accuracy and mean PCC over a grid of alpha values.
    Sweep {
        /// Selects the prior: ig (unimodal mode), zero_image or lm_plus_cap.
        #[arg(long)]
        objective: Option<String>,
        /// Comma-separated alpha values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        lm_dir: Option<PathBuf>,
        #[arg(long)]
        normalize: bool,
    },
}

impl Cli {
    /// File values, then flags, then the environment.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.global.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let g = &self.global;
        if let Some(o) = &g.out {
            cfg.out_dir = o.clone();
        }
        if g.seed.is_some() {
            cfg.seed = g.seed;
        }
        if let Some(w) = g.workers {
            cfg.workers = w;
        }
        if let Some(d) = &g.model_dir {
            cfg.model_dir = Some(d.clone());
        }
        match &self.command {
            Command::Gen => {}
            Command::Train {
                beta,
                gamma,
                steps,
                batch_size,
            } => {
                cfg.train.beta = beta.unwrap_or(cfg.train.beta);
                cfg.train.gamma = gamma.unwrap_or(cfg.train.gamma);
                cfg.train.steps = steps.unwrap_or(cfg.train.steps);
                cfg.train.batch_size = batch_size.unwrap_or(cfg.train.batch_size);
            }
            Command::Eval {
                objective,
                truth_map,
                lm_dir,
                normalize,
            } => {
                if let Some(o) = objective {
                    cfg.eval.objective = o.clone();
                }
                if truth_map.is_some() {
                    cfg.eval.truth_map = truth_map.clone();
                }
                if lm_dir.is_some() {
                    cfg.eval.lm_dir = lm_dir.clone();
                }
                cfg.eval.normalize |= normalize;
            }
            Command::Sweep {
                objective,
                grid,
                lm_dir,
                normalize,
            } => {
                if let Some(o) = objective {
                    cfg.eval.objective = o.clone();
                }
                if let Some(g) = grid {
                    cfg.eval.alpha_grid = g.clone();
                }
                if lm_dir.is_some() {
                    cfg.eval.lm_dir = lm_dir.clone();
                }
                cfg.eval.normalize |= normalize;
            }
        }
        cfg.resolve()?;
        Ok(cfg)
    }
}

/// Runs one parsed invocation and returns the process exit code.
pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = cli.resolve().and_then(|cfg| match cli.command {
        Command::Gen => cmd_gen(&cfg, out).map(|_| ()),
        Command::Train { .. } => cmd_train(&cfg, out).map(|_| ()),
        Command::Eval { .. } => cmd_eval(&cfg, out).map(|_| ()),
        Command::Sweep { .. } => cmd_sweep(&cfg, out).map(|_| ()),
    });
    match result {
        Ok(()) => error::EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
