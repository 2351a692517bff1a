use std::process::ExitCode;

fn main() -> ExitCode {
    homogen::logging::init();
    ExitCode::from(homogen::cli::run(std::env::args_os()))
}
