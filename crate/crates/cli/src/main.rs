use std::process::ExitCode;

fn main() -> ExitCode {
    lsepool_cli::run(std::env::args_os())
}
