//! `care-lab`: generation, training, ablation and scoring front end.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

pub use commands::Outcome;
pub use config::{RunConfig, KEYS};
pub use error::CliError;

pub const THREADS_ENV: &str = "CARE_LAB_THREADS";

const COMMANDS: &[(&str, &str)] = &[
    ("synth-gen", "export the synthetic benchmark, its index and a signal audit"),
    ("train", "train on the seen domains; write checkpoints and the training log"),
    ("eval-unseen", "score a checkpoint on the unseen domains"),
    ("ablate", "train and score all four variants over several seeds"),
    ("metrics", "score action, grounding or pose predictions"),
    ("gradcheck", "finite-difference checks of every primitive and the full model"),
    ("split", "stratified train/test split of an action annotation file"),
];

pub fn command() -> Command {
    let mut cmd = Command::new("care-lab")
        .about("Collaborative action recognition lab: synthetic benchmarks, training, ablation, metrics")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(format!(
            "Flags mirror config keys (--samples-per-class for samples_per_class). \
             Precedence: defaults < --config file < flags. {THREADS_ENV} sets the worker count (default 1)."
        ))
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value file, # starts a comment"),
        )
        .arg(
            Arg::new("force")
                .long("force")
                .global(true)
                .action(ArgAction::SetTrue)
                .help("overwrite existing outputs"),
        );
    for &(key, help) in KEYS {
        cmd = cmd.arg(
            Arg::new(key)
                .long(key.replace('_', "-"))
                .global(true)
                .value_name("VALUE")
                .help(help)
                .hide_short_help(true),
        );
    }
    for &(name, about) in COMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about));
    }
    cmd
}

/// Defaults, then the config file, then explicit flags.
pub fn resolve(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    for &(key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

/// Worker count from [`THREADS_ENV`], 1 when unset.
pub fn thread_count() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Parses `args` (program name first) and runs the chosen command.
pub fn run<I, T>(args: I) -> Result<Outcome, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = command().try_get_matches_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = resolve(sub)?;
    let force = sub.get_flag("force");
    dispatch(name, &cfg, force)
}

pub fn dispatch(name: &str, cfg: &RunConfig, force: bool) -> Result<Outcome, CliError> {
    match name {
        "synth-gen" => commands::synth_gen(cfg, force),
        "train" => commands::train(cfg, force),
        "eval-unseen" => commands::eval_unseen(cfg, force),
        "ablate" => commands::ablate(cfg, force),
        "metrics" => commands::metrics(cfg, force),
        "gradcheck" => commands::gradcheck(cfg, force),
        "split" => commands::split(cfg, force),
        other => Err(CliError::Config(format!("unknown command {other:?}"))),
    }
}
