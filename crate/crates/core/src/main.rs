use std::process::ExitCode;

fn main() -> ExitCode {
    deepfool::cli::run_cli()
}
