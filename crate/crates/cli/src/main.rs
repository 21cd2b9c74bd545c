use clap::Parser;

use plateflow_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("plateflow: {e}");
        std::process::exit(e.exit_code());
    }
}
