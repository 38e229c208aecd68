use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(schro_chaos_cli::run(std::env::args_os(), &mut std::io::stdout().lock()))
}
