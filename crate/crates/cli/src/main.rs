use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use textloc_cli::{run_command, AblationParam, Command, ExperimentConfig, Split, OUT_ENV};

/// Text-to-point-cloud localization experiments.
#[derive(Parser)]
#[command(name = "textloc", version)]
struct Cli {
    /// TOML experiment config; omitted keys take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key by dotted path, e.g. `--set cells.stride=15`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root; takes precedence over `out_dir` in the config.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train and test scenes.
    GenScene,
    /// Use an external labeled point cloud as one split's scene.
    ImportScene {
        cloud: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Generate template descriptions for both scenes.
    GenQueries,
    /// Sample the cell databases.
    BuildCells,
    /// Pretrain the point branch by instance classification.
    PretrainPoints,
    /// Train the retrieval model and index the test cells.
    TrainCoarse,
    /// Rebuild the test index from the coarse checkpoint.
    BuildIndex,
    /// Train the matcher and translation regressor.
    TrainFine,
    /// Compute the recall grid for every configured mode.
    Evaluate {
        /// Dump fine predictions on the GT cell for this many queries.
        #[arg(long, default_value_t = 0)]
        debug: usize,
    },
    /// Sweep one setting, running the whole pipeline per value.
    Ablate {
        #[arg(value_enum)]
        param: AblationParam,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Draw SVG charts from existing metric tables.
    Plot {
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long, value_enum, value_delimiter = ',')]
        ablation: Vec<AblationParam>,
    },
    /// Every stage from scene generation to evaluation.
    Pipeline,
    /// Print the effective config as TOML.
    Config,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (_, 0) => "info",
        (_, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let mut cfg = match ExperimentConfig::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    let split = |s: SplitArg| match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let command = match cli.command {
        Cmd::Config => {
            print!("{}", cfg.to_toml());
            return ExitCode::SUCCESS;
        }
        Cmd::GenScene => Command::GenScene,
        Cmd::ImportScene { cloud, split: s } => Command::ImportScene { cloud, split: split(s) },
        Cmd::GenQueries => Command::GenQueries,
        Cmd::BuildCells => Command::BuildCells,
        Cmd::PretrainPoints => Command::PretrainPoints,
        Cmd::TrainCoarse => Command::TrainCoarse,
        Cmd::BuildIndex => Command::BuildIndex,
        Cmd::TrainFine => Command::TrainFine,
        Cmd::Evaluate { debug } => Command::Evaluate { debug },
        Cmd::Ablate { param, values } => Command::Ablate { param, values },
        Cmd::Plot { modes, ablation } => Command::Plot {
            modes,
            ablations: ablation,
        },
        Cmd::Pipeline => Command::Pipeline,
    };
    match run_command(&command, &cfg) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
