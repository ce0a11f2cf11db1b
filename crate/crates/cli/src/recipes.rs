use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{parser::ValueSource, value_parser, Arg, ArgAction, ArgMatches, Command};
use serde_json::{json, Value};
use skillforge::build::{package_model, standard_recipes};
use skillforge::pipeline::{
    deserialize_dag, execute, generate_cli, serialize_dag, ActivityRegistry, ArtifactEnv, CommandSpec, ExecuteOptions,
    Executor, ParamKind, PipelineError, RecipeDag, RetryPolicy,
};

use crate::commands::{absolute, build_config, load_valid_model};
use crate::{failure, usage, CliResult, Globals};

/// The standard recipes with their generated command specs.
pub struct Recipes {
    entries: Vec<(RecipeDag, CommandSpec)>,
}

impl Recipes {
    pub fn load(registry: &ActivityRegistry) -> CliResult<Self> {
        let mut entries = Vec::new();
        for dag in standard_recipes(registry).map_err(failure)? {
            let spec = generate_cli(&dag).map_err(failure)?;
            entries.push((dag, spec));
        }
        Ok(Recipes { entries })
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(_, s)| s.name.clone()).collect()
    }

    fn find(&self, name: &str) -> Option<&(RecipeDag, CommandSpec)> {
        self.entries.iter().find(|(d, s)| s.name == name || d.name == name)
    }

    pub fn commands(&self) -> Vec<Command> {
        self.entries.iter().map(|(_, spec)| to_command(spec)).collect()
    }

    pub fn run(&self, g: &Globals, registry: &ActivityRegistry, name: &str, m: &ArgMatches) -> CliResult {
        let (dag, spec) = self.find(name).ok_or_else(|| usage(format!("unknown command {name}")))?;
        let mut values = BTreeMap::new();
        for f in &spec.flags {
            if m.value_source(&f.long) == Some(ValueSource::CommandLine) {
                values.insert(f.long.clone(), m.get_one::<String>(&f.long).expect("present").clone());
            }
        }
        let (dag, params, executor) = spec.apply(dag, &values).map_err(usage)?;
        let executor = executor.or_else(|| g.executor.clone()).unwrap_or_default();
        let mut params = with_fallbacks(g, &dag, params)?;
        package_model_dir(&dag, &mut params)?;
        run_dag(registry, &dag, params, executor, RetryPolicy::default(), false)
    }
}

fn to_command(spec: &CommandSpec) -> Command {
    let mut cmd = Command::new(spec.name.clone()).about(format!("Run the {} recipe", spec.recipe));
    for f in &spec.flags {
        let mut help = f.help.clone();
        if let Some(d) = &f.default {
            help.push_str(&format!(" [default: {d}]"));
        }
        // Defaults are applied by the recipe itself, so explicit flags can be
        // told apart from global fallbacks.
        cmd = cmd.arg(
            Arg::new(f.long.clone())
                .long(f.long.clone())
                .value_name(f.value_name.trim_matches(['<', '>']).to_uppercase())
                .required(f.required)
                .allow_hyphen_values(true)
                .help(help),
        );
    }
    cmd
}

/// Fills parameters the user left out from the config file and the global
/// `--seed`/`--store` flags, then makes path parameters absolute.
fn with_fallbacks(g: &Globals, dag: &RecipeDag, explicit: BTreeMap<String, Value>) -> CliResult<BTreeMap<String, Value>> {
    let declared = |name: &str| dag.params.iter().any(|p| p.name == name);
    let mut params: BTreeMap<String, Value> = BTreeMap::new();
    params.extend(build_config(g).to_params().into_iter().filter(|(k, _)| declared(k)));
    if declared("store") {
        params.insert("store".into(), json!(g.store.to_string_lossy()));
    }
    params.extend(explicit);
    let mut resolved = dag.resolve_params(&params).map_err(usage)?;
    for p in &dag.params {
        if p.kind == ParamKind::Path {
            if let Some(Value::String(s)) = resolved.get(&p.name) {
                let abs = absolute(Path::new(s))?;
                resolved.insert(p.name.clone(), json!(abs.to_string_lossy()));
            }
        }
    }
    Ok(resolved)
}

/// A `model` parameter naming an interaction model directory is validated
/// and packaged into the work directory first.
fn package_model_dir(dag: &RecipeDag, params: &mut BTreeMap<String, Value>) -> CliResult {
    let Some(Value::String(model)) = params.get("model") else { return Ok(()) };
    let dir = PathBuf::from(model);
    if !dag.params.iter().any(|p| p.name == "model") || !dir.is_dir() {
        return Ok(());
    }
    let model = load_valid_model(&dir)?;
    let skill = params.get("skill").and_then(Value::as_str).unwrap_or("skill").to_string();
    let work = params.get("work").and_then(Value::as_str).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("work"));
    let packaged = package_model(&model, &work, &skill).map_err(failure)?;
    params.insert("model".into(), json!(packaged.to_string_lossy()));
    Ok(())
}

fn run_dag(
    registry: &ActivityRegistry,
    dag: &RecipeDag,
    params: BTreeMap<String, Value>,
    executor: Executor,
    retry: RetryPolicy,
    incremental: bool,
) -> CliResult {
    let opts = ExecuteOptions { executor, retry, params, incremental, cancel: None };
    let report = execute(dag, registry, &ArtifactEnv::from_env(), &opts).map_err(|e| match e {
        PipelineError::Io(_) => failure(e),
        other => usage(other),
    })?;
    println!("{}", report.summary());
    for (uri, digest) in &report.outputs {
        println!("output {uri} sha256:{digest}");
    }
    if report.succeeded() {
        Ok(())
    } else {
        Err(failure(format!("recipe {} failed", dag.name)))
    }
}

pub fn pipeline_command() -> Command {
    let dag_arg = || Arg::new("dag").value_name("DAG_JSON|RECIPE").help("DAG file, or the name of a standard recipe");
    Command::new("pipeline")
        .about("Run or inspect recipe DAGs")
        .subcommand_required(true)
        .subcommand(
            Command::new("run")
                .about("Execute a serialized DAG")
                .arg(dag_arg().required(true))
                .arg(
                    Arg::new("param")
                        .short('p')
                        .long("param")
                        .value_name("NAME=VALUE")
                        .action(ArgAction::Append)
                        .help("Recipe parameter override"),
                )
                .arg(
                    Arg::new("retries")
                        .long("retries")
                        .value_name("N")
                        .default_value("0")
                        .value_parser(value_parser!(u32))
                        .help("Extra attempts per failed activity"),
                )
                .arg(Arg::new("incremental").long("incremental").action(ArgAction::SetTrue).help("Reuse up-to-date outputs")),
        )
        .subcommand(
            Command::new("show")
                .about("List the standard recipes, or describe one DAG")
                .arg(dag_arg())
                .arg(Arg::new("json").long("json").action(ArgAction::SetTrue).help("Print the DAG as JSON")),
        )
}

fn load_dag(recipes: &Recipes, registry: &ActivityRegistry, arg: &str) -> CliResult<RecipeDag> {
    if let Some((dag, _)) = recipes.find(arg) {
        return Ok(dag.clone());
    }
    let text = std::fs::read_to_string(arg).map_err(|e| usage(format!("{arg}: {e}")))?;
    deserialize_dag(&text, registry).map_err(|e| usage(format!("{arg}: {e}")))
}

fn describe(dag: &RecipeDag) -> CliResult<String> {
    let mut s = format!("recipe {} ({} nodes)\n", dag.name, dag.nodes.len());
    for p in &dag.params {
        let default = p.default.as_ref().map_or("required".to_string(), |d| format!("default {d}"));
        s.push_str(&format!("  param {}: {} ({default})\n", p.name, p.kind));
    }
    for i in dag.topo_order().map_err(usage)? {
        let n = &dag.nodes[i];
        let ins: Vec<String> = n.inputs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let outs: Vec<String> = n.outputs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        s.push_str(&format!("  {} [{}]\n    in:  {}\n    out: {}\n", n.id, n.activity, ins.join(" "), outs.join(" ")));
    }
    for o in &dag.outputs {
        s.push_str(&format!("  output {o}\n"));
    }
    Ok(s)
}

pub fn pipeline(g: &Globals, registry: &ActivityRegistry, recipes: &Recipes, m: &ArgMatches) -> CliResult {
    match m.subcommand().expect("subcommand required") {
        ("run", m) => {
            let dag = load_dag(recipes, registry, m.get_one::<String>("dag").expect("required"))?;
            let mut explicit = BTreeMap::new();
            for kv in m.get_many::<String>("param").into_iter().flatten() {
                let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("expected NAME=VALUE, got {kv:?}")))?;
                let kind = dag
                    .params
                    .iter()
                    .find(|p| p.name == k)
                    .map(|p| p.kind)
                    .ok_or_else(|| usage(format!("recipe {} has no parameter {k}", dag.name)))?;
                explicit.insert(k.to_string(), kind.parse(k, v).map_err(usage)?);
            }
            let mut params = with_fallbacks(g, &dag, explicit)?;
            package_model_dir(&dag, &mut params)?;
            let retry = RetryPolicy::retries(*m.get_one::<u32>("retries").expect("has default"));
            run_dag(registry, &dag, params, g.executor(), retry, m.get_flag("incremental"))
        }
        ("show", m) => {
            match m.get_one::<String>("dag") {
                None => {
                    println!("recipes:");
                    for (_, spec) in &recipes.entries {
                        println!("  {}", spec.usage());
                    }
                }
                Some(arg) => {
                    let dag = load_dag(recipes, registry, arg)?;
                    if m.get_flag("json") {
                        println!("{}", serialize_dag(&dag));
                    } else {
                        print!("{}", describe(&dag)?);
                    }
                }
            }
            Ok(())
        }
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}
