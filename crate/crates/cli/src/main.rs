use clap::Parser;
use std::process::ExitCode;

mod cmd;

// Exit codes: 0 success, 2 usage (clap uses the same), 3 invalid input,
// 4 training divergence.
fn main() -> ExitCode {
    let cli = cmd::Cli::parse();
    match cmd::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
