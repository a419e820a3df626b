use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use fairstamp_cli::config::{parse_layers, parse_positions};
use fairstamp_cli::{error_line, exit_code, Overrides, Pipeline, PipelineConfig, Stage, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "fairstamp", version, about = "Locate, stamp and evaluate biased associations")]
struct Cli {
    #[arg(value_enum)]
    stage: Stage,
    /// Pipeline config file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config and FAIRSTAMP_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every stage; overrides the config and FAIRSTAMP_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Restoration positions for tracing: subject or all.
    #[arg(long)]
    positions: Option<String>,
    /// Comma-separated 1-based layers to stamp instead of tracing.
    #[arg(long)]
    layers: Option<String>,
}

fn fail(stage: Option<Stage>, code: u8, message: &str) -> ExitCode {
    eprintln!("{}", error_line(stage, code, message));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return fail(None, EXIT_USAGE, first.trim_start_matches("error: "));
        }
    };
    let setup = || -> fairstamp::Result<Pipeline> {
        let mut config = PipelineConfig::load(&cli.config)?;
        let flags = Overrides {
            out: cli.out.clone(),
            seed: cli.seed,
            positions: cli.positions.as_deref().map(parse_positions).transpose()?,
            layers: cli.layers.as_deref().map(parse_layers).transpose()?,
        };
        config.apply(&Overrides::from_env()?.then(flags));
        Pipeline::new(config)
    };
    let mut pipeline = match setup() {
        Ok(p) => p,
        Err(e) => return fail(None, exit_code(&e), &e.to_string()),
    };
    match pipeline.run(cli.stage) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(Some(e.stage), exit_code(&e.error), &e.error.to_string()),
    }
}
