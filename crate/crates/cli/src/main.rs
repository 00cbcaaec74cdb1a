use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use oodsynth_cli::artifacts::{guard, write_bytes};
use oodsynth_cli::{CliResult, ModelKind, Pipeline, RunConfig};
use oodsynth_core::ScoreKind;

#[derive(Parser)]
#[command(
    name = "oodsynth",
    version,
    about = "Guided OOD sample synthesis on 2-D toy data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (JSON); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default config to PATH (or stdout).
    Init {
        path: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    GenData(Common),
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: DiffusionOverrides,
    },
    TrainClassifier(Common),
    SampleOod(Common),
    Finetune(Common),
    Eval {
        #[command(flatten)]
        common: Common,
        /// Models to evaluate.
        #[arg(long, value_enum, default_values_t = ModelKind::ALL)]
        model: Vec<ModelKind>,
        /// Scores included in the comparison table.
        #[arg(long, value_enum, default_values_t = [ScoreArg::Energy, ScoreArg::Knn, ScoreArg::Unified])]
        score: Vec<ScoreArg>,
    },
    Report(Common),
    /// Every stage in order.
    Run(Common),
}

/// Per-run overrides of the diffusion section of the config.
#[derive(Args, Clone)]
struct DiffusionOverrides {
    /// Number of diffusion steps T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl DiffusionOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.diffusion;
        if let Some(v) = self.steps {
            d.schedule.steps = v;
        }
        if let Some(v) = self.beta_start {
            d.schedule.beta_start = v;
        }
        if let Some(v) = self.beta_end {
            d.schedule.beta_end = v;
        }
        if let Some(v) = self.epochs {
            d.epochs = v;
        }
        if let Some(v) = self.lr {
            d.lr = v;
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScoreArg {
    Energy,
    Knn,
    Unified,
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn pipeline(common: &Common) -> CliResult<Pipeline> {
    Pipeline::new(load_config(common)?, common.force)
}

fn init(path: Option<&Path>, common: &Common) -> CliResult<()> {
    let text = load_config(common)?.to_json();
    match path {
        Some(p) => {
            guard(&[p.to_path_buf()], common.force)?;
            write_bytes(p, text.as_bytes())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Init { path, common } => init(path.as_deref(), &common),
        Command::GenData(c) => pipeline(&c)?.gen_data().map(drop),
        Command::TrainDiffusion { common, overrides } => {
            let mut cfg = load_config(&common)?;
            overrides.apply(&mut cfg);
            Pipeline::new(cfg, common.force)?
                .train_diffusion()
                .map(drop)
        }
        Command::TrainClassifier(c) => pipeline(&c)?.train_classifier().map(drop),
        Command::SampleOod(c) => pipeline(&c)?.sample_ood().map(drop),
        Command::Finetune(c) => pipeline(&c)?.finetune().map(drop),
        Command::Eval {
            common,
            model,
            score,
        } => {
            let scores: Vec<ScoreKind> = score
                .into_iter()
                .map(|s| match s {
                    ScoreArg::Energy => ScoreKind::Energy,
                    ScoreArg::Knn => ScoreKind::Knn,
                    ScoreArg::Unified => ScoreKind::Unified,
                })
                .collect();
            pipeline(&common)?.eval(&model, &scores).map(drop)
        }
        Command::Report(c) => pipeline(&c)?.report().map(drop),
        Command::Run(c) => pipeline(&c)?.run_all().map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
