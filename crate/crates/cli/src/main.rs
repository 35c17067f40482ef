use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use heatseg_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or_default();
            let err = CliError::usage(first.trim_start_matches("error: "));
            let _ = e.print();
            eprintln!("{}", err.json_line());
            return ExitCode::from(err.kind.code() as u8);
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => {
            let _ = lock.flush();
            ExitCode::SUCCESS
        }
        Err(err) => {
            let _ = lock.flush();
            eprintln!("{}", err.json_line());
            ExitCode::from(err.kind.code() as u8)
        }
    }
}
