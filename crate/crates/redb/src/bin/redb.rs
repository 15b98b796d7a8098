use std::process::ExitCode;

fn main() -> ExitCode {
    redb::cli::main_with_args(std::env::args_os())
}
