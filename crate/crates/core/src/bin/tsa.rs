use clap::Parser;
use tsa_core::cli::{init_threads, run, Cli};

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run(&cli, &mut std::io::stdout().lock()));
    if let Err(e) = result {
        eprintln!("tsa: {e}");
        std::process::exit(1);
    }
}
