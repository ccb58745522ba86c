use clap::Parser;
use oga_cli::{run, Cli, THREADS_ENV};
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    eprintln!("warning: cannot set {THREADS_ENV}: {e}");
                }
            }
            _ => eprintln!("warning: ignoring {THREADS_ENV}={v}; expected a positive integer"),
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
