fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FUSIONALIGN_LOG", "warn"))
        .init();
    std::process::exit(fusionalign::cli::run(std::env::args_os()));
}
