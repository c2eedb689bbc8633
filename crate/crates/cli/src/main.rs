use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match versemi::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ versemi::CliError::Usage(_)) => {
            if let versemi::CliError::Usage(inner) = &e {
                let _ = inner.print();
            }
            ExitCode::from(e.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
