mod args;
mod commands;
mod config;

use std::fs;
use std::process::ExitCode;

use clap::Parser;
use serde_json::Value;
use tkto_core::recipe::Recipe;

use args::{Cli, Command, ReplayArgs};

/// A mistake in flags, config or input files; exits with status 2.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn execute(cmd: &Command, recipe: &Recipe) -> anyhow::Result<()> {
    config::echo(recipe)?;
    match cmd {
        Command::GenData(a) => commands::gen_data(cmd, a, recipe),
        Command::Train(a) => commands::train_cmd(cmd, a, recipe),
        Command::Eval(a) => commands::eval_cmd(cmd, a, recipe),
        Command::Analyze(a) => commands::analyze(cmd, a, recipe),
        Command::Sweep(a) => commands::sweep(cmd, a, recipe),
        Command::Replay(a) => replay(a),
    }
}

fn replay(a: &ReplayArgs) -> anyhow::Result<()> {
    let bad = |e: &dyn std::fmt::Display| UserError(format!("{}: {e}", a.manifest.display()));
    let text = fs::read_to_string(&a.manifest).map_err(|e| bad(&e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
    let mut cmd: Command =
        serde_json::from_value(value["invocation"].clone()).map_err(|e| bad(&e))?;
    let recipe: Recipe = serde_json::from_value(value["config"].clone()).map_err(|e| bad(&e))?;
    if let Some(out) = &a.out {
        match &mut cmd {
            Command::GenData(x) => x.out = Some(out.clone()),
            Command::Train(x) => x.out = Some(out.clone()),
            Command::Eval(x) => x.out = Some(out.clone()),
            Command::Analyze(x) => x.out = Some(out.clone()),
            Command::Sweep(x) => x.out = Some(out.clone()),
            Command::Replay(_) => {}
        }
    }
    execute(&cmd, &recipe)
}

fn run(cmd: Command) -> anyhow::Result<()> {
    let recipe = match &cmd {
        Command::GenData(a) => config::resolve(&a.common, None)?,
        Command::Train(a) => config::resolve(&a.common, Some(a))?,
        Command::Eval(a) => config::resolve(&a.common, None)?,
        Command::Analyze(a) => config::resolve(&a.common, None)?,
        Command::Sweep(a) => config::resolve(&a.common, None)?,
        Command::Replay(a) => return replay(a),
    };
    execute(&cmd, &recipe)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let user = e.downcast_ref::<UserError>().is_some()
                || e.downcast_ref::<tkto_core::Error>()
                    .is_some_and(|e| e.is_user_error());
            ExitCode::from(if user { 2 } else { 1 })
        }
    }
}
