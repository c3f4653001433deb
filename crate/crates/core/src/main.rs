use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(lexmap::cli::dispatch(std::env::args_os()).clamp(0, 255) as u8)
}
