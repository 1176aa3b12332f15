//! Thin entry point: parse arguments, run, propagate the exit status.

use clap::Parser;

fn main() {
    let cli = lensopt::cli::Cli::parse();
    std::process::exit(i32::from(lensopt::cli::run(&cli)));
}
