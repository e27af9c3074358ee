use clap::Parser;

fn main() {
    let cli = smica::cli::Cli::parse();
    if let Err(err) = smica::cli::run(cli) {
        eprintln!("error[{}]: {}", err.kind(), err);
        std::process::exit(err.exit_code());
    }
}
