use clap::Parser;

fn main() {
    let cli = awg_cli::Cli::parse();
    if let Err(e) = awg_cli::run(cli) {
        eprintln!("awg: {e}");
        std::process::exit(e.exit_code());
    }
}
