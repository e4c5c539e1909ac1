// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use visedit_cli::{execute, parse_config, AttributeMode, CliError, Command};

#[derive(Parser)]
#[command(name = "visedit", version, about = "Toy visual-representation editing pipeline")]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Dotted override, e.g. `--set train.lr=0.003`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the VQA set and, given a base model, the edit cases.
    GenData,
    /// Train the base model.
    Pretrain,
    /// Module-contribution bars and visual-contribution heatmaps.
    Attribute {
        #[arg(long, value_enum, default_value_t = Mode::Standard)]
        mode: Mode,
    },
    /// Train the visual edit adapter.
    TrainVead,
    /// Score the adapter, the unedited model and the fine-tuning baseline.
    EditEval,
    /// One adapter per insertion layer.
    SweepLayers,
    /// Adapters with modules or loss terms removed.
    Ablate,
    /// Print the effective configuration and exit.
    ShowConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Standard,
    PostEdit,
    WrongToken,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = parse_config(cli.config.as_deref(), &cli.overrides)?;
    let cmd = match cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::Pretrain => Command::Pretrain,
        Cmd::Attribute { mode } => Command::Attribute(match mode {
            Mode::Standard => AttributeMode::Standard,
            Mode::PostEdit => AttributeMode::PostEdit,
            Mode::WrongToken => AttributeMode::WrongToken,
        }),
        Cmd::TrainVead => Command::TrainVead,
        Cmd::EditEval => Command::EditEval,
        Cmd::SweepLayers => Command::SweepLayers,
        Cmd::Ablate => Command::Ablate,
        Cmd::ShowConfig => {
            print!("{}", visedit_cli::config::echo(&cfg)?);
            return Ok(());
        }
    };
    let dir = execute(cmd, &cfg)?;
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
