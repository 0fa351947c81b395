use std::process::ExitCode;

use clap::Parser;
use ncp_cli::{run, Cli, Failure, EXIT_INPUT};

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("NCP_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Failure::Input(format!("NCP_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Input(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = configure_threads().and_then(|()| run(&cli));
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(failure) => {
            eprintln!("ncp: {failure}");
            if let Failure::Arbitrage { report: Some(report), .. } = &failure {
                let text = serde_json::to_string_pretty(report).expect("report serialises");
                match &cli.common.out {
                    Some(path) => {
                        if let Err(e) = std::fs::write(path, text + "\n") {
                            eprintln!("ncp: cannot write {}: {e}", path.display());
                        }
                    }
                    None => println!("{text}"),
                }
            }
            ExitCode::from(failure.code() as u8)
        }
    }
}
