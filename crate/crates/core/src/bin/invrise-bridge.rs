//! Serves a scorer checkpoint over the bridge protocol on stdin/stdout.

use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use invrise_core::classifier::{serve_stdio, ConvScorer, ServeExit, ServeOptions};

#[derive(Parser)]
#[command(version, about = "Classifier bridge over newline-delimited JSON")]
struct Args {
    /// Scorer checkpoint to serve.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Answer requests arriving together in reverse order, this many at a time.
    #[arg(long, default_value_t = 0)]
    reorder_window: usize,
    /// Exit without answering after this many requests.
    #[arg(long)]
    die_after: Option<usize>,
    /// Stop answering after this many requests.
    #[arg(long)]
    stall_after: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let model = match ConvScorer::load(&args.checkpoint) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("invrise-bridge: {e}");
            return ExitCode::from(2);
        }
    };
    let options = ServeOptions {
        reorder_window: args.reorder_window,
        die_after: args.die_after,
        stall_after: args.stall_after,
    };
    match serve_stdio(&model, BufReader::new(io::stdin()), io::stdout().lock(), &options) {
        Ok(ServeExit::InputClosed) => ExitCode::SUCCESS,
        Ok(ServeExit::Died) => ExitCode::from(3),
        Err(e) => {
            eprintln!("invrise-bridge: {e}");
            ExitCode::FAILURE
        }
    }
}
