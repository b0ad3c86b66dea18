//! Binary entry point: dispatches to the command-line layer and renders any
//! failure as a single machine-readable JSON line on stderr.

use std::process::ExitCode;

fn main() -> ExitCode {
    match ttoreg::cli::run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}
