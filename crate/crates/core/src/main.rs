use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = pointnr::cli::Cli::parse();
    if let Err(e) = pointnr::cli::run(cli) {
        eprintln!("{}", pointnr::cli::report(&e));
        std::process::exit(e.class().exit_code());
    }
}
