use std::process::ExitCode;

fn main() -> ExitCode {
    match piecewise::cli::run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(piecewise::cli::exit_code_for(&e) as u8)
        }
    }
}
