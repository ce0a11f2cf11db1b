use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;

use super::execute::Executor;
use super::recipe::{ParamKind, RecipeDag};
use super::PipelineError;
use crate::text::kebab_case;

/// Flags every generated subcommand owns; recipe parameters may not use them.
pub const RESERVED_FLAGS: &[&str] = &["executor", "help"];

#[derive(Debug, Clone, PartialEq)]
pub enum FlagTarget {
    Param(String),
    /// Overrides a source artifact URI wherever it is consumed.
    SourceUri(String),
    Executor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlagSpec {
    /// Long name without the leading dashes.
    pub long: String,
    pub value_name: String,
    pub help: String,
    pub default: Option<String>,
    pub required: bool,
    pub target: FlagTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandSpec {
    pub name: String,
    pub recipe: String,
    pub flags: Vec<FlagSpec>,
}

fn default_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One subcommand per recipe: a flag per parameter, a `--<slot>-uri` flag
/// per fixed source artifact, and `--executor`.
pub fn generate_cli(dag: &RecipeDag) -> Result<CommandSpec, PipelineError> {
    let mut flags = Vec::new();
    let mut taken: BTreeSet<String> = RESERVED_FLAGS.iter().map(|s| s.to_string()).collect();
    for p in &dag.params {
        let long = kebab_case(&p.name);
        if RESERVED_FLAGS.contains(&long.as_str()) {
            return Err(PipelineError::ReservedFlag(long));
        }
        if !taken.insert(long.clone()) {
            return Err(PipelineError::DuplicateFlag(long));
        }
        flags.push(FlagSpec {
            value_name: format!("<{}>", p.kind),
            help: format!("recipe parameter {} ({})", p.name, p.kind),
            default: p.default.as_ref().map(default_text),
            required: p.default.is_none(),
            target: FlagTarget::Param(p.name.clone()),
            long,
        });
    }
    // Sources built from parameters are already covered by those flags.
    for uri in dag.sources() {
        if uri.contains("${") {
            continue;
        }
        let (node, slot) = dag
            .nodes
            .iter()
            .find_map(|n| n.inputs.iter().find(|(_, u)| u.as_str() == uri).map(|(s, _)| (n.id.as_str(), s.as_str())))
            .expect("a source is consumed by some node");
        let mut long = kebab_case(&format!("{slot}_uri"));
        if taken.contains(&long) {
            long = kebab_case(&format!("{node}_{slot}_uri"));
        }
        if !taken.insert(long.clone()) {
            return Err(PipelineError::DuplicateFlag(long));
        }
        flags.push(FlagSpec {
            long,
            value_name: "<uri>".into(),
            help: format!("source artifact read by {node}.{slot}"),
            default: Some(uri.to_string()),
            required: false,
            target: FlagTarget::SourceUri(uri.to_string()),
        });
    }
    flags.push(FlagSpec {
        long: "executor".into(),
        value_name: "<local|parallel[:N]>".into(),
        help: "executor used to run the recipe".into(),
        default: Some("local".into()),
        required: false,
        target: FlagTarget::Executor,
    });
    Ok(CommandSpec { name: kebab_case(&dag.name), recipe: dag.name.clone(), flags })
}

impl CommandSpec {
    pub fn flag(&self, long: &str) -> Option<&FlagSpec> {
        self.flags.iter().find(|f| f.long == long)
    }

    /// `build-ic-model --data-file <path> --executor <local|parallel[:N]>`
    pub fn usage(&self) -> String {
        let mut s = self.name.clone();
        for f in &self.flags {
            let part = format!("--{} {}", f.long, f.value_name);
            if f.required {
                s.push_str(&format!(" {part}"));
            } else {
                s.push_str(&format!(" [{part}]"));
            }
        }
        s
    }

    /// Applies parsed flag values (keyed by long name) to the recipe:
    /// returns the DAG with source URIs rewritten, the parameter overrides
    /// and the executor if one was given.
    pub fn apply(
        &self,
        dag: &RecipeDag,
        values: &BTreeMap<String, String>,
    ) -> Result<(RecipeDag, BTreeMap<String, Value>, Option<Executor>), PipelineError> {
        let mut dag = dag.clone();
        let mut params = BTreeMap::new();
        let mut executor = None;
        for (long, raw) in values {
            let flag = self.flag(long).ok_or_else(|| PipelineError::UnknownParam(long.clone()))?;
            match &flag.target {
                FlagTarget::Param(name) => {
                    let kind = dag.params.iter().find(|p| &p.name == name).map_or(ParamKind::String, |p| p.kind);
                    params.insert(name.clone(), kind.parse(name, raw)?);
                }
                FlagTarget::SourceUri(old) => {
                    super::ArtifactUri::parse(raw)?;
                    for n in &mut dag.nodes {
                        for u in n.inputs.values_mut() {
                            if u == old {
                                *u = raw.clone();
                            }
                        }
                    }
                }
                FlagTarget::Executor => executor = Some(raw.parse()?),
            }
        }
        Ok((dag, params, executor))
    }
}
