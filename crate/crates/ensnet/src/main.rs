use std::process::ExitCode;

fn main() -> ExitCode {
    ensnet::cli::run()
}
