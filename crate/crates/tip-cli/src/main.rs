//! `tip`: data synthesis, SBP labeling, training, inference, evaluation,
//! terrain export and sensor calibration for the sparse-IMU full-body
//! reconstruction pipeline.

mod run;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = run::Cli::parse();
    match run::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
