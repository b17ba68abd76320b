use clap::Parser;

fn main() {
    let cli = mvlab::cli::Cli::parse();
    std::process::exit(mvlab::cli::run(cli));
}
