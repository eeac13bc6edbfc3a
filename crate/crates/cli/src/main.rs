use clap::Parser;

use metricgp_cli::commands::{exit_code_for, flush_line};
use metricgp_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        flush_line(&format!("error: {err}"));
        std::process::exit(exit_code_for(&err));
    }
}
