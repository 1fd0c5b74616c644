use std::process::ExitCode;

use clap::Parser;
use loaded_dice_cli::args::Cli;
use loaded_dice_cli::{describe, exit_code, run, EXIT_NUMERIC};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("loaded-dice: cannot start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let msg = describe(&err);
            if code == EXIT_NUMERIC {
                eprintln!("loaded-dice: numeric failure in stage {msg}");
            } else {
                eprintln!("loaded-dice: {msg}");
            }
            ExitCode::from(code as u8)
        }
    }
}
