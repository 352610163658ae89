use clap::Parser;

use dcbdl::cli::{configure_threads, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|_| run(cli)) {
        let message = e.to_string().replace(['\n', '\r'], " ");
        eprintln!("error kind={} message={message}", e.kind());
        std::process::exit(1);
    }
}
