use std::process::ExitCode;

use clap::Parser;
use compound_forms_cli::{init_threads, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit().code() as u8);
    }
    let mut stdout = std::io::stdout().lock();
    ExitCode::from(run(&cli, &mut stdout).code() as u8)
}
