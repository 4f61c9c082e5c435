//! Standalone scripted mock server for offline runs and debugging.

use adapteval::mock::{load_script, serve_at};
use clap::Parser;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "adapteval-mock",
    version,
    about = "Scripted chat-completions mock server"
)]
struct Cli {
    /// Scenario script (JSON with steps, rules, and a fallback)
    #[arg(long)]
    script: PathBuf,
    /// Address to listen on
    #[arg(long, default_value = "127.0.0.1:8089")]
    addr: SocketAddr,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let script = match load_script(&cli.script) {
        Ok(script) => script,
        Err(message) => {
            eprintln!("error: {message}");
            return ExitCode::from(1);
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: tokio runtime: {e}");
            return ExitCode::from(1);
        }
    };
    runtime.block_on(async move {
        match serve_at(cli.addr, script).await {
            Ok(handle) => {
                println!("mock server listening on {}", handle.base_url());
                let _ = tokio::signal::ctrl_c().await;
                println!("shutting down after {} request(s)", handle.request_count());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: cannot bind {}: {e}", cli.addr);
                ExitCode::from(1)
            }
        }
    })
}
