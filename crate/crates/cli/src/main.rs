use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use datadock_cli::cli::{render_text, Cli, Command};
use datadock_cli::ops::{envelope, execute, ApiError};
use datadock_cli::server;
use datadock_core::{Platform, PlatformConfig};

fn open(cli: &Cli) -> Result<Platform> {
    let config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PlatformConfig::load(&cli.root)?,
    };
    Platform::open(&cli.root, config).with_context(|| format!("opening store at {}", cli.root.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Serve { addr } = &cli.command {
        let platform = open(&cli)?;
        let rt = tokio::runtime::Runtime::new()?;
        rt.block_on(server::serve(platform, *addr))?;
        return Ok(ExitCode::SUCCESS);
    }
    let req = cli.request()?;
    let mut platform = open(&cli)?;
    match execute(&mut platform, req) {
        Ok(data) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&data)?);
            } else {
                print!("{}", render_text(&cli.command, &data));
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            let err = ApiError::from(&e);
            if cli.json {
                eprintln!("{}", serde_json::to_string_pretty(&envelope(&Err(err)))?);
            } else {
                eprintln!("error: {e}");
                for reason in &err.reasons {
                    eprintln!("  {reason}");
                }
            }
            Ok(ExitCode::FAILURE)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
