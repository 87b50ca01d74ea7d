use clap::Parser;

fn main() {
    let cli = trajprior_cli::Cli::parse();
    if let Err(e) = trajprior_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
