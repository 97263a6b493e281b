use std::process::ExitCode;

use clap::Parser;
use vocalsim_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Usage errors exit with status 2 from inside `parse`.
    let cli = Cli::parse();
    let command = cli.command.name();
    match run(cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {command}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
