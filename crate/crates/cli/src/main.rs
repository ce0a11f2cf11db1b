mod commands;
mod config;
mod console;
mod eval;
mod recipes;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use skillforge::pipeline::Executor;
use thiserror::Error;

use crate::config::CliConfig;

/// Failures split by who has to fix them: the user (exit 2) or us (exit 1).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

/// Settings given before the subcommand.
#[derive(Debug, Clone)]
pub struct Globals {
    pub store: PathBuf,
    pub executor: Option<Executor>,
    pub seed: Option<u64>,
    pub config: CliConfig,
}

impl Globals {
    pub fn executor(&self) -> Executor {
        self.executor.clone().unwrap_or_default()
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.config.build.train.seed)
    }
}

fn cli(recipe_commands: Vec<Command>, recipe_names: &[String]) -> Command {
    let executor_help = "Executor for pipeline runs: local, parallel or parallel:N";
    Command::new("skillforge")
        .about("Build, test and serve spoken-language-understanding skills")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(format!("Recipes: {}", recipe_names.join(", ")))
        .arg(
            Arg::new("store")
                .long("store")
                .value_name("DIR")
                .default_value("store")
                .value_parser(value_parser!(PathBuf))
                .help("Model store root"),
        )
        .arg(Arg::new("executor").long("executor").value_name("EXECUTOR").help(executor_help))
        .arg(Arg::new("seed").long("seed").value_name("INT").value_parser(value_parser!(u64)).help("Random seed"))
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .help("Training and runtime defaults (TOML, or JSON for .json files)"),
        )
        .arg(Arg::new("verbose").short('v').long("verbose").action(ArgAction::Count).help("Log more (repeat for debug)"))
        .subcommand(commands::build_command())
        .subcommand(console::command())
        .subcommand(commands::sample_command())
        .subcommand(eval::command())
        .subcommand(recipes::pipeline_command())
        .subcommands(recipe_commands)
}

fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
}

fn globals(m: &ArgMatches) -> CliResult<Globals> {
    let config = match m.get_one::<PathBuf>("config") {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    let executor = m
        .get_one::<String>("executor")
        .map(|s| s.parse::<Executor>())
        .transpose()
        .map_err(usage)?;
    Ok(Globals {
        store: m.get_one::<PathBuf>("store").cloned().expect("has default"),
        executor,
        seed: m.get_one::<u64>("seed").copied(),
        config,
    })
}

fn run() -> CliResult {
    let registry = skillforge::build::build_registry();
    let recipes = recipes::Recipes::load(&registry)?;
    // clap exits 0 for --help and 2 for malformed arguments.
    let matches = cli(recipes.commands(), &recipes.names()).get_matches();
    init_logging(matches.get_count("verbose"));
    let g = globals(&matches)?;
    match matches.subcommand().expect("subcommand required") {
        ("build", m) => commands::build(&g, &registry, m),
        ("console", m) => console::run(&g, m),
        ("sample", m) => commands::sample(&g, m),
        ("eval", m) => eval::run(&g, m),
        ("pipeline", m) => recipes::pipeline(&g, &registry, &recipes, m),
        (name, m) => recipes.run(&g, &registry, name, m),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
