use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(discoda::cli::run() as u8)
}
