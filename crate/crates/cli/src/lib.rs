//! Command-line driver: training, evaluation, verification suites, stability
//! sweeps, retrofitting and memory benchmarks.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "revlm", version, about = "Reversible transformer language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the commands that build or load a model.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// UTF-8 corpus, or `synthetic` for generated prose.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// baseline, midpoint, midpoint_a, leapfrog, hamiltonian.
    #[arg(long)]
    pub block: Option<String>,
    #[arg(long, env = "REVLM_SEED")]
    pub seed: Option<u64>,
    /// fp32 or fp64.
    #[arg(long)]
    pub dtype: Option<String>,
}

impl Common {
    /// Applies the flags on top of `base`.
    pub fn apply(&self, mut base: RunConfig) -> Result<RunConfig> {
        if let Some(d) = &self.data {
            base.set("data", d)?;
        }
        if let Some(o) = &self.out {
            base.out = o.clone();
        }
        if let Some(b) = &self.block {
            base.set("block", b)?;
        }
        if let Some(s) = self.seed {
            base.seed = s;
        }
        if let Some(d) = &self.dtype {
            base.set("dtype", d)?;
        }
        Ok(base)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(base)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics and checkpoints to the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total optimizer steps, overriding the config.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Report held-out loss of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare reversible, stored-activation and finite-difference gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every layer forward and back and compare the states.
    InvertCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Perturb the reconstructed state at this layer (fault injection).
        #[arg(long)]
        corrupt_layer: Option<usize>,
    },
    /// Forward-backward stability of `p⁺ = a p⁻ + (b + hλ) p`.
    Stability {
        #[arg(long, allow_hyphen_values = true)]
        a: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        b: Option<f64>,
        /// Complex, e.g. `-0.5`, `2i`, `0.1-1.5i`.
        #[arg(long, allow_hyphen_values = true)]
        hlambda: Option<String>,
        /// Sweep the standard grid and emit CSV.
        #[arg(long)]
        grid: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a trained baseline checkpoint into a reversible student and fine-tune it.
    Retrofit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fixed-point iterations of the previous-state estimator.
        #[arg(long)]
        k: Option<usize>,
        /// Constant coefficient for every layer instead of the random schedule.
        #[arg(long, allow_hyphen_values = true)]
        a: Option<f64>,
    },
    /// Activation memory, step time and budget-limited batch size per depth.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64")]
        depths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        seq: usize,
        #[arg(long, default_value_t = 1 << 28)]
        budget_bytes: usize,
    },
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train { common, resume, steps } => commands::train::cmd_train(&common, resume.as_deref(), steps, out),
        Command::Eval { common, checkpoint } => commands::train::cmd_eval(&common, &checkpoint, out),
        Command::GradCheck { common, checkpoint } => commands::verify::cmd_grad_check(&common, checkpoint.as_deref(), out),
        Command::InvertCheck {
            common,
            checkpoint,
            corrupt_layer,
        } => commands::verify::cmd_invert_check(&common, checkpoint.as_deref(), corrupt_layer, out),
        Command::Stability {
            a,
            b,
            hlambda,
            grid,
            out: path,
        } => commands::stability::cmd_stability(a, b, hlambda.as_deref(), grid, path.as_deref(), out),
        Command::Retrofit { common, checkpoint, k, a } => commands::retrofit::cmd_retrofit(&common, &checkpoint, k, a, out),
        Command::Bench {
            common,
            depths,
            width,
            seq,
            budget_bytes,
        } => commands::bench::cmd_bench(&common, &depths, width, seq, budget_bytes, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            if !matches!(e, CliError::Verification(_)) {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}
