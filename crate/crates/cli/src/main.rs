//! `veil`: train, evaluate and attack adversarially debiased text models.

mod commands;
mod config;
mod error;
mod table;

use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::config::{RunConfig, KEYS};
use crate::error::CliError;

const COMMANDS: &[(&str, &str)] = &[
    (
        "train",
        "Train a model; writes model.veil, history.jsonl and config.txt under --out",
    ),
    (
        "eval",
        "Task metric and per-group accuracy of --checkpoint on --test",
    ),
    (
        "attack",
        "Fresh attacker on --checkpoint representations: fit on --train, score on --test",
    ),
    (
        "crossval",
        "k-fold train + eval (+ attack) over the corpus in --train",
    ),
    (
        "synth",
        "Write a synthetic confounded corpus and manifest under --out",
    ),
];

fn cli() -> Command {
    let mut cmd = Command::new("veil")
        .about("Adversarially debiased text representations")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key=value file applied before flags"),
        )
        .arg(
            Arg::new("json")
                .long("json")
                .global(true)
                .value_name("PATH")
                .help("also write the report as JSON"),
        );
    for (key, help) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(&*Box::leak(key.replace('_', "-").into_boxed_str()))
                .global(true)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(*help),
        );
    }
    for (name, about) in COMMANDS {
        cmd = cmd.subcommand(Command::new(*name).about(*about));
    }
    cmd
}

/// Defaults, then `--config`, then flags.
fn resolve(matches: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    if let Some(path) = matches.get_one::<String>("config") {
        config.apply_file(&PathBuf::from(path))?;
    }
    for (key, _) in KEYS {
        if let Some(v) = matches.get_one::<String>(key) {
            config.set(key, v)?;
        }
    }
    Ok(config)
}

fn run() -> Result<(), CliError> {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                e.exit();
            }
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("bad arguments")
                .trim_start_matches("error: ");
            return Err(CliError::usage(first));
        }
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let config = resolve(sub)?;
    let json = sub.get_one::<String>("json").map(PathBuf::from);
    match name {
        "train" => commands::train(&config, json.as_deref()),
        "eval" => commands::eval(&config, json.as_deref()),
        "attack" => commands::attack(&config, json.as_deref()),
        "crossval" => commands::crossval(&config, json.as_deref()),
        "synth" => commands::synth(&config, json.as_deref()),
        other => Err(CliError::usage(format!("unknown command `{other}`"))),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
