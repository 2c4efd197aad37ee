use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use leocsi::models::Task;
use leocsi_cli::commands::{self, Baseline, EvalArgs, GRAD_TOL};
use leocsi_cli::config::{Preset, RunConfig};
use leocsi_cli::run::RunDir;
use leocsi_cli::CliError;

/// LEO channel prediction and beamforming toolkit.
#[derive(Parser)]
#[command(name = "leocsi", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base parameter set the config file and overrides apply to.
    #[arg(long, global = true, value_enum, default_value = "reference")]
    preset: Preset,
    /// Override one config value, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate and write the training and test datasets.
    Generate,
    /// Train a full one-slot predictor and keep it as a frozen backbone.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a channel predictor.
    TrainCp {
        #[arg(long)]
        data: PathBuf,
        /// Model directory whose backbone and encoder are reused.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Fine-tune a beamformer.
    TrainBf {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Score a model or a baseline on a test set.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Number of future slots to score.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Evaluate models and baselines across the configured sweep.
    Sweep {
        #[arg(long)]
        model: Vec<PathBuf>,
    },
    /// Check autodiff gradients of both losses against finite differences.
    GradCheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Pretrain { .. } => "pretrain",
            Command::TrainCp { .. } => "train-cp",
            Command::TrainBf { .. } => "train-bf",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::GradCheck => "grad-check",
        }
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig, CliError> {
    let overlay = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Some(RunConfig::from_json(&text)?)
        }
        None => None,
    };
    let mut sets = c.sets.clone();
    if let Some(s) = c.seed {
        sets.push(format!("seed={s}"));
    }
    RunConfig::resolve(RunConfig::preset(c.preset), overlay, &sets)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let cfg = resolve_config(&cli.common)?;
    if let Command::GradCheck = cli.command {
        let mut worst = 0.0f64;
        for (task, err) in commands::grad_check(cfg.seed)? {
            println!("{task:?}: max relative error {err:.3e}");
            worst = worst.max(err);
        }
        if worst >= GRAD_TOL {
            return Err(CliError::Numeric(format!("gradient check failed: {worst:.3e} >= {GRAD_TOL:e}")));
        }
        println!("gradient check passed");
        return Ok(());
    }
    let mut rd = RunDir::create(&cli.common.out, cli.command.name(), &cfg)?;
    let result = match &cli.command {
        Command::Generate => commands::generate(&cfg, &mut rd),
        Command::Pretrain { data } => commands::pretrain(&cfg, data, &mut rd),
        Command::TrainCp { data, pretrained } => {
            commands::train(&cfg, Task::Prediction, data, pretrained.as_deref(), &mut rd)
        }
        Command::TrainBf { data, pretrained } => {
            commands::train(&cfg, Task::Beamforming, data, pretrained.as_deref(), &mut rd)
        }
        Command::Eval { data, model, baseline, horizon } => commands::eval(
            &cfg,
            EvalArgs {
                data,
                model: model.as_deref(),
                baseline: *baseline,
                horizon: *horizon,
            },
            &mut rd,
        ),
        Command::Sweep { model } => commands::sweep(&cfg, model, &mut rd),
        Command::GradCheck => unreachable!(),
    };
    match result {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            rd.finish("ok")?;
            println!("run: {}", rd.path.display());
            Ok(())
        }
        Err(e) => {
            if let Err(m) = rd.finish(&format!("failed: {e}")) {
                log::warn!("could not write manifest: {m}");
            }
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("leocsi: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
