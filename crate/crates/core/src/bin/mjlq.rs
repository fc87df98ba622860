use std::process::ExitCode;

fn main() -> ExitCode {
    let outcome = mjlq::cli::run_from_args(std::env::args_os());
    eprintln!("{}", outcome.summary);
    ExitCode::from(outcome.exit_code as u8)
}
