use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stlayout::cli;

/// Layout-guided attention editing on toy feature videos.
#[derive(Parser)]
#[command(version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural source video, its layout masks and a starter config.
    GenerateFixture { spec: PathBuf, out_dir: PathBuf },
    /// Run an edit described by a JSON config.
    Run { config: PathBuf },
    /// Compare two run directories; `dir_a` is the baseline.
    Compare {
        dir_a: PathBuf,
        dir_b: PathBuf,
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STLAYOUT_LOG", "info")).init();
    let args = Args::parse();
    let result = match &args.command {
        Command::GenerateFixture { spec, out_dir } => cli::generate_fixture(spec, out_dir),
        Command::Run { config } => cli::run(config).map(|outcome| {
            println!("{}", outcome.output_dir.display());
        }),
        Command::Compare {
            dir_a,
            dir_b,
            out_dir,
        } => cli::compare(dir_a, dir_b, out_dir).map(|s| {
            println!(
                "mean leakage delta {:+.6e}\nmean coverage delta {:+.6e}",
                s.mean_leakage_delta, s.mean_coverage_delta
            );
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
