use clap::Parser;
use tempres_cli::{execute, exit_code, Cli, CliError};

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = execute(&cli);
    match &outcome {
        Ok(report) => {
            print!("{}", report.text);
            if report.capped > 0 {
                eprintln!("tempres {}: {}", cli.command, CliError::Capped(report.capped));
            }
        }
        Err(e) => eprintln!("tempres {}: {e}", cli.command),
    }
    std::process::exit(exit_code(&outcome));
}
