use clap::Parser;

fn main() {
    let cli = ssep_mdp_cli::Cli::parse();
    std::process::exit(ssep_mdp_cli::main_with(&cli));
}
