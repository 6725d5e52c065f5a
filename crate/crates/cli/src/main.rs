use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modalsig_cli::config::{ConfigError, PipelineConfig};
use modalsig_cli::pipeline::{cmd_detect, cmd_select_vars, cmd_synth, RunOptions};

/// Detect a small signal population as an extra density mode of an
/// experimental sample relative to a background sample.
#[derive(Parser)]
#[command(name = "modalsig", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count variable relevance between background and experimental samples.
    SelectVars(Common),
    /// Run the full detection pipeline.
    Detect(Common),
    /// Write synthetic background and experimental samples.
    Synth(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the configured pipeline seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Omit timestamps and the output directory from reports.
    #[arg(long)]
    canonical_output: bool,
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<modalsig::Error>() {
            if matches!(e, modalsig::Error::Io { .. } | modalsig::Error::Csv { .. }) {
                return 3;
            }
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, run): (
        &Common,
        fn(PipelineConfig, &RunOptions) -> anyhow::Result<_>,
    ) = match &cli.command {
        Command::SelectVars(c) => (c, cmd_select_vars),
        Command::Detect(c) => (c, cmd_detect),
        Command::Synth(c) => (c, cmd_synth),
    };
    let opts = RunOptions {
        seed: common.seed,
        out_dir: common.out.clone(),
        canonical: common.canonical_output,
    };
    let result = PipelineConfig::load(&common.config)
        .map_err(anyhow::Error::from)
        .and_then(|cfg| run(cfg, &opts));
    match result {
        Ok(summary) => {
            println!("{}", summary.outcome.describe());
            ExitCode::from(summary.outcome.exit_code() as u8)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
