use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(alphagrpo_cli::main_with_args(std::env::args().collect()))
}
