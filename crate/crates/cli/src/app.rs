//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use robustdiff::SamplerKind;

use crate::commands::{
    cmd_distill, cmd_dump_data, cmd_eval, cmd_sample, cmd_train, cmd_verify, Reference, SampleOptions, Suite,
};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "robustdiff", version, about = "Adversarially robust diffusion and consistency models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    pub config: PathBuf,
    /// Continue from a checkpoint written by the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory; overrides `io.out_dir` without changing the run.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a noise-prediction model (adversarial when `at.enabled`).
    Train(RunArgs),
    /// Distill a consistency model from a teacher checkpoint or Gaussian oracle.
    Distill(RunArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Compare a sample file with a reference distribution.
    Eval(EvalArgs),
    /// Write the configured dataset as a sample file.
    DumpData {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rows to write; defaults to `data.n`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run a verification suite; exits with status 3 on any failure.
    Verify {
        #[command(subcommand)]
        suite: VerifyCommand,
    },
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub sampler: Option<SamplerKind>,
    #[arg(long)]
    pub nfe: Option<usize>,
    /// DPM-Solver order (1 or 2).
    #[arg(long)]
    pub order: Option<u8>,
    /// Evaluations for consistency checkpoints.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Constant ES scaling factor.
    #[arg(long)]
    pub es_lambda: Option<f64>,
    /// ES schedule file: a number, a JSON array, or one number per step.
    #[arg(long)]
    pub es_schedule: Option<PathBuf>,
    /// Sampler wrapped by ES.
    #[arg(long)]
    pub es_base: Option<SamplerKind>,
    /// Clip denoised estimates to [-bound, bound] (model coordinates).
    #[arg(long)]
    pub clip_denoised: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub samples: PathBuf,
    /// Reference sample file.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub reference: Option<PathBuf>,
    /// Use the dataset of this run configuration as the reference.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub n_proj: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics CSV to append the result to.
    #[arg(long)]
    pub append: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    /// Transport-entropy inequality on an (m, t) grid.
    Talagrand {
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 3.0)]
        m_max: f64,
    },
    /// One-step sample distance against the distillation-loss bound.
    #[command(name = "cd_bound", alias = "cd-bound")]
    CdBound {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reverse-mode gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// First-order DPM-Solver against DDIM.
    #[command(name = "sampler_equiv", alias = "sampler-equiv")]
    SamplerEquiv {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a.config, a.resume.as_deref(), a.out_dir.as_deref(), out).map(drop),
        Command::Distill(a) => cmd_distill(&a.config, a.resume.as_deref(), a.out_dir.as_deref(), out).map(drop),
        Command::Sample(a) => {
            let opts = SampleOptions {
                sampler: a.sampler,
                nfe: a.nfe,
                order: a.order,
                steps: a.steps,
                n: a.n,
                seed: a.seed,
                es_lambda: a.es_lambda,
                es_schedule: a.es_schedule,
                es_base: a.es_base,
                clip_denoised: a.clip_denoised,
            };
            cmd_sample(&a.checkpoint, &opts, &a.out, out).map(drop)
        }
        Command::Eval(a) => {
            let reference = match (a.reference, a.config) {
                (Some(r), None) => Reference::File(r),
                (None, Some(c)) => Reference::Config(c),
                _ => return Err(CliError::Usage("give exactly one of --reference or --config".into())),
            };
            cmd_eval(&a.samples, &reference, a.n_proj, a.seed, a.append.as_deref(), out).map(drop)
        }
        Command::DumpData { config, out: path, n } => cmd_dump_data(&config, n, &path, out),
        Command::Verify { suite } => {
            let suite = match suite {
                VerifyCommand::Talagrand { steps, points, m_max } => Suite::Talagrand { steps, points, m_max },
                VerifyCommand::CdBound { checkpoint, n, seed } => Suite::CdBound { checkpoint, n, seed },
                VerifyCommand::Gradcheck { instances, seed } => Suite::Gradcheck { instances, seed },
                VerifyCommand::SamplerEquiv { instances, seed } => Suite::SamplerEquiv { instances, seed },
            };
            cmd_verify(&suite, out)
        }
    }
}

/// Parse `args` (including the program name), run the command and return the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
