use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use voxelpipe::config::{Action, PipelineConfig};
use voxelpipe::driver::{run, RunLog};

/// Medical-volume pipeline tool.
#[derive(Debug, Parser)]
#[command(name = "voxelpipe", version)]
struct Cli {
    /// One of: partition, normalise-train, sample, aggregate-identity,
    /// evaluate, inspect.
    action: Action,

    /// INI configuration file.
    #[arg(short, long)]
    config: PathBuf,

    /// Overrides of the form `section.key=value`, applied after the file.
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut overrides = cli.overrides;
    overrides.push(format!("system.action={}", cli.action));
    let mut log = RunLog::from_env();
    let result = PipelineConfig::parse(&cli.config, &overrides).and_then(|cfg| {
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        run(&cfg, &mut out, &mut log)
    });
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
