use clap::Parser;
use evpix_cli::{commands::exit_code, execute, Cli};

fn main() {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(exit_code(&e));
        }
    }
}
