use clap::Parser;
use etr_cli::commands::{run, Cli, CliError};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().lines().next().unwrap_or("usage error").to_string());
            eprintln!("{}", err.json_line());
            std::process::exit(err.exit_code());
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", e.json_line());
        std::process::exit(e.exit_code());
    }
}
