use std::io::IsTerminal;
use std::process::ExitCode;

use clap::Parser;
use flowlens_cli::{run, Cli, Command};

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Ingest(_) => "ingest",
        Command::Flow => "flow",
        Command::Train(_) => "train",
        Command::Kselect(_) => "kselect",
        Command::Partition(_) => "partition",
        Command::Attribute(_) => "attribute",
        Command::Serve(_) => "serve",
        Command::Replay(_) => "replay",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr).with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match run(&cli) {
        Ok(text) => {
            if !text.is_empty() {
                println!("{text}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({
                "command": command_name(&cli.command),
                "error": format!("{e:#}"),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
