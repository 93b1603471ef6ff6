use std::process::ExitCode;

fn main() -> ExitCode {
    affine_fence::cli::run_from_args(std::env::args_os())
}
