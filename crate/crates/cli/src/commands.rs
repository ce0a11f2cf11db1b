use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use serde_json::json;
use skillforge::build::{compile_grammar, multi_skill_recipe, package_model, BuildConfig};
use skillforge::interaction_model::{validate_interaction_model, BuiltinSlotTypes, InteractionModel};
use skillforge::pipeline::{execute, ActivityRegistry, ArtifactEnv, ExecuteOptions};
use skillforge::runtime::{valid_skill_id, ModelStore};
use skillforge::text::kebab_case;

use crate::{failure, usage, CliResult, Globals};

pub fn build_command() -> Command {
    Command::new("build")
        .about("Validate interaction models and build them into the model store")
        .arg(
            Arg::new("models")
                .value_name("MODEL_DIR")
                .required(true)
                .num_args(1..)
                .value_parser(value_parser!(PathBuf))
                .help("Interaction model directories, one skill each"),
        )
        .arg(Arg::new("skill").long("skill").value_name("ID").help("Skill id (single model only; default: directory name)"))
        .arg(
            Arg::new("work")
                .long("work")
                .value_name("DIR")
                .value_parser(value_parser!(PathBuf))
                .help("Intermediate artifact directory (default: <store>/.work)"),
        )
        .arg(
            Arg::new("incremental")
                .long("incremental")
                .action(ArgAction::SetTrue)
                .help("Skip activities whose inputs and parameters are unchanged"),
        )
}

pub fn sample_command() -> Command {
    Command::new("sample")
        .about("Sample labeled utterances from a stored skill or a model directory")
        .arg(Arg::new("source").value_name("SKILL|MODEL_DIR").required(true))
        .arg(
            Arg::new("n")
                .short('n')
                .long("count")
                .value_name("N")
                .default_value("10")
                .allow_negative_numbers(true)
                .value_parser(value_parser!(i64))
                .help("Number of utterances"),
        )
        .arg(Arg::new("seed").long("seed").value_name("INT").value_parser(value_parser!(u64)).help("Sampling seed"))
}

pub fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| failure(format!("{}: {e}", p.display())))
}

/// The effective build configuration: config file, then `--seed`.
pub fn build_config(g: &Globals) -> BuildConfig {
    let mut c = g.config.build.clone();
    c.train.seed = g.seed();
    c.train.hash_seed = c.train.seed;
    c
}

/// Loads and validates a model directory. Every violation is printed;
/// any violation is a user error.
pub fn load_valid_model(dir: &Path) -> CliResult<InteractionModel> {
    let model = InteractionModel::load_dir(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let report = validate_interaction_model(&model, &BuiltinSlotTypes::bundled());
    if !report.is_buildable() {
        for v in &report.violations {
            eprintln!("{}: {v}", dir.display());
        }
        return Err(usage(format!("{}: {} violation(s)", dir.display(), report.violations.len())));
    }
    Ok(model)
}

fn skill_id_for(dir: &Path) -> CliResult<String> {
    let name = absolute(dir)?.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let id = kebab_case(&name);
    if !valid_skill_id(&id) {
        return Err(usage(format!("cannot derive a skill id from {}; pass --skill", dir.display())));
    }
    Ok(id)
}

pub fn build(g: &Globals, registry: &ActivityRegistry, m: &ArgMatches) -> CliResult {
    let started = Instant::now();
    let dirs: Vec<&PathBuf> = m.get_many::<PathBuf>("models").expect("required").collect();
    let explicit = m.get_one::<String>("skill");
    if explicit.is_some() && dirs.len() > 1 {
        return Err(usage("--skill applies to a single model directory"));
    }

    // Validate everything before building anything.
    let mut skills = Vec::new();
    let mut models = Vec::new();
    let mut invalid = 0;
    for dir in &dirs {
        match load_valid_model(dir) {
            Ok(model) => models.push(model),
            Err(e) => {
                eprintln!("error: {e}");
                invalid += 1;
                continue;
            }
        }
        let id = match explicit {
            Some(id) if valid_skill_id(id) => id.clone(),
            Some(id) => return Err(usage(format!("invalid skill id {id:?}"))),
            None => skill_id_for(dir)?,
        };
        skills.push(id);
    }
    if invalid > 0 {
        return Err(usage(format!("{invalid} model(s) failed validation")));
    }
    let unique: BTreeSet<&String> = skills.iter().collect();
    if unique.len() != skills.len() {
        return Err(usage("two model directories map to the same skill id; build them separately"));
    }

    let store = absolute(&g.store)?;
    let work = absolute(&m.get_one::<PathBuf>("work").cloned().unwrap_or_else(|| store.join(".work")))?;
    for (skill, model) in skills.iter().zip(&models) {
        package_model(model, &work, skill).map_err(failure)?;
    }
    let dag = multi_skill_recipe(&skills, registry).map_err(failure)?;
    let mut params = build_config(g).to_params();
    params.insert("work".into(), json!(work.to_string_lossy()));
    params.insert("store".into(), json!(store.to_string_lossy()));
    let opts = ExecuteOptions {
        executor: g.executor(),
        params,
        incremental: m.get_flag("incremental"),
        ..Default::default()
    };
    let report = execute(&dag, registry, &ArtifactEnv::new(&work), &opts).map_err(usage)?;
    println!("{}", report.summary());
    if !report.succeeded() {
        return Err(failure("build failed"));
    }
    let ms = ModelStore::open(&store);
    for skill in &skills {
        let version = ms.latest_version(skill).map_err(failure)?;
        let bundle = ms.load(skill, Some(version)).map_err(failure)?;
        println!("built {skill} v{version} {}", bundle.digest());
    }
    println!("wall time {:.2} s", started.elapsed().as_secs_f64());
    Ok(())
}

pub fn sample(g: &Globals, m: &ArgMatches) -> CliResult {
    let n = *m.get_one::<i64>("n").expect("has default");
    if n <= 0 {
        return Err(usage(format!("sample count must be positive, got {n}")));
    }
    let seed = m.get_one::<u64>("seed").copied().unwrap_or_else(|| g.seed());
    let source = m.get_one::<String>("source").expect("required");
    let path = Path::new(source);
    let grammar = if path.is_dir() {
        compile_grammar(&load_valid_model(path)?).map_err(failure)?
    } else {
        ModelStore::open(&g.store).load(source, None).map_err(|e| usage(format!("{source}: {e}")))?.grammar
    };
    let samples = grammar.sample_utterances(n as usize, seed).map_err(failure)?;
    let mut out = String::new();
    for s in samples {
        out.push_str(&s.to_line());
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}
