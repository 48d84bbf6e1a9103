use clap::Parser;

fn main() -> std::process::ExitCode {
    match earth::cli::run(earth::cli::Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
