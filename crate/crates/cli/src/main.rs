use std::process::ExitCode;

fn main() -> ExitCode {
    match loopgrid_cli::run(std::env::args_os()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) if e.kind == "Help" => {
            print!("{}", e.message);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
