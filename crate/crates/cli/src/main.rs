fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FORGE_LOG", "warn")).init();
    std::process::exit(forge_cli::main_with_args(std::env::args_os()));
}
