use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dfl_cli::run(std::env::args().skip(1)) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("dfl: {}", msg.lines().next().unwrap_or("error"));
            ExitCode::from(2)
        }
    }
}
