use gratingscope_service::cli::{run, Io};

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let stdin = std::io::stdin();
    let code = run(
        std::env::args(),
        &mut Io {
            stdin: &mut stdin.lock(),
            stdout: &mut std::io::stdout(),
            stderr: &mut std::io::stderr(),
        },
    );
    std::process::exit(code);
}
