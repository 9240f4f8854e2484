use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match luminet_cli::commands::run_from(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.code == luminet_cli::EXIT_OK => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
