use std::process::ExitCode;

use clap::Parser;
use fovnerf::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": "usage", "message": first } })
            );
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp_millis()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } })
            );
            ExitCode::FAILURE
        }
    }
}
