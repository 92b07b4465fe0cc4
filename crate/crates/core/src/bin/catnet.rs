use std::path::PathBuf;
use std::process::ExitCode;

use catnet::cli::commands::parse_op_kind;
use catnet::cli::{self, Checkpoint, EvalModel, RunConfig};
use catnet::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "catnet", version, about = "Few-shot segmentation on synthetic shape families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into --out.
    Gen,
    /// Train one fold; writes checkpoint, loss.csv, loss.pgm, config.txt.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the fold's novel classes.
    Eval {
        #[arg(long, required_unless_present = "echo_truth")]
        checkpoint: Option<PathBuf>,
        /// Predict the ground truth instead of running a model.
        #[arg(long)]
        echo_truth: bool,
    },
    /// Train and evaluate every mode × depth cell.
    Ablate,
    /// Finite-difference check of every op and module.
    Gradcheck {
        /// Corrupt this op's backward rule.
        #[arg(long)]
        fault: Option<String>,
        /// Only run checks whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
    },
}

/// Config keys settable from the command line; each overrides the
/// `--config` file (or, for `train --resume`, the checkpoint's config).
#[derive(Args)]
struct Flags {
    /// key = value file to start from.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    data: Option<String>,
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true)]
    n_classes: Option<String>,
    #[arg(long, global = true)]
    samples_per_class: Option<String>,
    #[arg(long, global = true)]
    image_size: Option<String>,
    #[arg(long, global = true)]
    folds: Option<String>,
    #[arg(long, global = true)]
    fold: Option<String>,
    #[arg(long, global = true)]
    iters: Option<String>,
    #[arg(long, global = true)]
    lr: Option<String>,
    #[arg(long, global = true)]
    log_interval: Option<String>,
    #[arg(long, global = true)]
    embed_dim: Option<String>,
    #[arg(long, global = true)]
    heads: Option<String>,
    #[arg(long, global = true)]
    depth: Option<String>,
    #[arg(long, global = true)]
    tied: Option<String>,
    /// s2q, q2s or bidir.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    deep_supervision: Option<String>,
    #[arg(long, global = true)]
    initial_loss_weight: Option<String>,
    #[arg(long, global = true)]
    alpha: Option<String>,
    #[arg(long, global = true)]
    tau: Option<String>,
    #[arg(long, global = true)]
    tau_hat: Option<String>,
    /// 1, 2 or both.
    #[arg(long, global = true)]
    setting: Option<String>,
    /// Comma-separated modes.
    #[arg(long, global = true)]
    ablate_modes: Option<String>,
    /// Comma-separated depths.
    #[arg(long, global = true)]
    ablate_depths: Option<String>,
}

impl Flags {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("seed", &self.seed),
            ("data", &self.data),
            ("out", &self.out),
            ("n_classes", &self.n_classes),
            ("samples_per_class", &self.samples_per_class),
            ("image_size", &self.image_size),
            ("folds", &self.folds),
            ("fold", &self.fold),
            ("iters", &self.iters),
            ("lr", &self.lr),
            ("log_interval", &self.log_interval),
            ("embed_dim", &self.embed_dim),
            ("heads", &self.heads),
            ("depth", &self.depth),
            ("tied", &self.tied),
            ("mode", &self.mode),
            ("deep_supervision", &self.deep_supervision),
            ("initial_loss_weight", &self.initial_loss_weight),
            ("alpha", &self.alpha),
            ("tau", &self.tau),
            ("tau_hat", &self.tau_hat),
            ("setting", &self.setting),
            ("ablate_modes", &self.ablate_modes),
            ("ablate_depths", &self.ablate_depths),
        ];
        all.into_iter().filter_map(|(k, v)| v.as_deref().map(|v| (k, v))).collect()
    }

    fn resolve(&self, base: Option<RunConfig>) -> catnet::Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                RunConfig::parse(&text)?
            }
            (None, Some(b)) => b,
            (None, None) => RunConfig::default(),
        };
        for (k, v) in self.overrides() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> catnet::Result<bool> {
    let log = &mut std::io::stderr();
    match cli.command {
        Command::Gen => {
            cli::cmd_gen(&cli.flags.resolve(None)?, log)?;
        }
        Command::Train { resume } => {
            let base = resume.as_deref().map(Checkpoint::load).transpose()?.map(|c| c.config);
            let cfg = cli.flags.resolve(base)?;
            let summary = cli::cmd_train(&cfg, resume.as_deref(), log)?;
            println!("{}", summary.checkpoint.display());
        }
        Command::Eval { checkpoint, echo_truth } => {
            let cfg = cli.flags.resolve(None)?;
            let model = match (echo_truth, checkpoint) {
                (true, _) => EvalModel::EchoTruth,
                (false, Some(p)) => EvalModel::Checkpoint(p),
                (false, None) => return Err(Error::Usage("eval needs --checkpoint or --echo-truth".into())),
            };
            for report in cli::cmd_eval(&cfg, &model, cli::threads_from_env()?, log)? {
                print!("{}", report.to_key_values());
            }
        }
        Command::Ablate => {
            let cfg = cli.flags.resolve(None)?;
            let table = cli::cmd_ablate(&cfg, cli::threads_from_env()?, log)?;
            print!("{}", table.to_key_values());
        }
        Command::Gradcheck { fault, filter } => {
            let cfg = cli.flags.resolve(None)?;
            let fault = fault.as_deref().map(parse_op_kind).transpose()?;
            let outcomes = cli::cmd_gradcheck(&cfg, fault, filter.as_deref(), &mut std::io::stdout())?;
            return Ok(outcomes.iter().all(|o| o.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
