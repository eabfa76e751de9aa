use std::process::ExitCode;

fn main() -> ExitCode {
    biphoton_cbs::cli::main_with_args(std::env::args_os())
}
