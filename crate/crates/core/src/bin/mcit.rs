fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<std::ffi::OsString> = std::env::args_os().collect();
    std::process::exit(mcit::cli::main_with_args(&argv));
}
