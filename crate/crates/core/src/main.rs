use clap::Parser;

fn main() {
    if let Err(e) = ctcs::cli::run(ctcs::cli::Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
