use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let mut stdout = std::io::stdout().lock();
    let code = posekit_cli::main_with_args(std::env::args_os(), &mut stdout);
    std::process::exit(code);
}
