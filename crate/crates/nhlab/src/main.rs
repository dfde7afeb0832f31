use clap::Parser;

fn main() {
    let cli = nhlab::cli::Cli::parse();
    std::process::exit(nhlab::cli::run(&cli));
}
