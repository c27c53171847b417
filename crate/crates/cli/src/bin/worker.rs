//! Worker process serving a reference backend over the line protocol.
//!
//! Mainly useful for exercising process supervision: `--abort-on-call`
//! aborts on the first request and `--hang-api` never answers one API.

use std::io::{self, BufWriter};
use std::process::ExitCode;

use clap::Parser;

use crossfuzz_core::backend::protocol::{serve, ServeOptions};
use crossfuzz_core::backend::{ReferenceBackend, Variant};

#[derive(Parser)]
#[command(name = "crossfuzz-worker", version, about = "Reference backend worker")]
struct Cli {
    /// stable or ftz
    #[arg(long, default_value = "stable")]
    variant: Variant,
    #[arg(long)]
    abort_on_call: bool,
    #[arg(long)]
    hang_api: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut backend = ReferenceBackend::new(cli.variant);
    let options = ServeOptions {
        abort_on_call: cli.abort_on_call,
        hang_api: cli.hang_api,
    };
    let stdin = io::stdin();
    let stdout = io::stdout();
    match serve(stdin.lock(), BufWriter::new(stdout.lock()), &mut backend, &options) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crossfuzz-worker: {e}");
            ExitCode::from(1)
        }
    }
}
