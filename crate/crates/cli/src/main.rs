use clap::Parser;
use survcut_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("survcut: {e}");
        std::process::exit(e.exit_code());
    }
}
