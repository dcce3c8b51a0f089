use std::process::ExitCode;

use arcnn_cli::{run, Cli, Failure};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) | Failure::Run(e) => eprintln!("error: {e:#}"),
                Failure::Diagnostics(n) => eprintln!("{n} problem(s) found"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
