use clap::Parser;

fn main() {
    let cli = igcap_cli::Cli::parse();
    let code = igcap_cli::run(&cli, &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
