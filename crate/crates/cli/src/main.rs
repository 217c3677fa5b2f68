use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = cdp_cli::Cli::parse();
    match cdp_cli::configure_threads().and_then(|()| cdp_cli::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
