use clap::Parser;

fn main() {
    let cli = mvtrack::cli::Cli::parse();
    if let Err(e) = mvtrack::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
