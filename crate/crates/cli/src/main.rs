use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = mmgt_cli::Cli::parse();
    if let Err(err) = mmgt_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(mmgt_cli::exit_code(&err));
    }
}
