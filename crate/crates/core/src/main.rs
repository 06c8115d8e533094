use clap::Parser;

fn main() {
    let cli = spatseg::cli::Cli::parse();
    if let Err(e) = spatseg::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
