fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut out = std::io::stdout().lock();
    let code = qnet_sim::main_with_args(std::env::args_os(), &mut out);
    std::process::exit(code);
}
