fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(mnar_ssl_cli::LOG_ENV, "warn")).init();
    std::process::exit(mnar_ssl_cli::run(std::env::args_os()));
}
