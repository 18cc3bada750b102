use clap::Parser;

fn main() {
    let cli = bsdeflow_cli::Cli::parse();
    std::process::exit(bsdeflow_cli::execute(&cli));
}
