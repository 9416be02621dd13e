use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = mtla_cli::Cli::parse();
    let stdout = std::io::stdout();
    match mtla_cli::run(&cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
