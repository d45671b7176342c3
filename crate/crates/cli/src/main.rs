use std::process::ExitCode;

fn main() -> ExitCode {
    lsta_cli::tune_allocator();
    ExitCode::from(lsta_cli::cli::main_with_args(std::env::args_os()))
}
