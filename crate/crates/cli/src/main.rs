mod args;
mod commands;
mod output;

use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

const EXIT_VALIDATION: u8 = 1;
const EXIT_DATA: u8 = 2;

fn run(cli: &Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.into())
            .build_global()?;
    }
    match &cli.command {
        Command::Interpolate(a) => commands::interpolate(a),
        Command::Convert(a) => commands::convert(a),
        Command::Eval(a) => commands::eval(a),
        Command::FitBoundary(a) => commands::fit_boundary_cmd(a),
        Command::DetectBlend(a) => commands::detect_blend(a),
        Command::NnWords(a) => commands::nn_words(a),
        Command::Cca(a) => commands::cca(a),
    }
}

/// Exit 2 for unreadable or malformed data, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<blendconv::Error>() {
            return if e.is_data_error() { EXIT_DATA } else { EXIT_VALIDATION };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_VALIDATION),
            };
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
