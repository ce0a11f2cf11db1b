use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::artifact::{Artifact, ArtifactUri};
use super::{ActivityError, PipelineError};

pub const DAG_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    String,
    Path,
    Int,
    Float,
    Bool,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::String => "string",
            ParamKind::Path => "path",
            ParamKind::Int => "int",
            ParamKind::Float => "float",
            ParamKind::Bool => "bool",
        }
    }

    pub fn accepts(self, v: &Value) -> bool {
        match self {
            ParamKind::String | ParamKind::Path => v.is_string(),
            ParamKind::Int => v.is_i64() || v.is_u64(),
            ParamKind::Float => v.is_number(),
            ParamKind::Bool => v.is_boolean(),
        }
    }

    /// Parses a command-line string into a value of this kind.
    pub fn parse(self, name: &str, s: &str) -> Result<Value, PipelineError> {
        let err = || PipelineError::ParamType { name: name.to_string(), expected: self.name(), got: format!("{s:?}") };
        Ok(match self {
            ParamKind::String | ParamKind::Path => Value::String(s.to_string()),
            ParamKind::Int => Value::from(s.parse::<i64>().map_err(|_| err())?),
            ParamKind::Float => Value::from(s.parse::<f64>().map_err(|_| err())?),
            ParamKind::Bool => Value::Bool(s.parse::<bool>().map_err(|_| err())?),
        })
    }

    pub(crate) fn check(self, name: &str, v: &Value) -> Result<(), PipelineError> {
        if self.accepts(v) {
            Ok(())
        } else {
            Err(PipelineError::ParamType { name: name.to_string(), expected: self.name(), got: v.to_string() })
        }
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

impl ParamSpec {
    pub fn new(name: &str, kind: ParamKind) -> Self {
        ParamSpec { name: name.to_string(), kind, default: None }
    }

    pub fn with_default(mut self, v: impl Into<Value>) -> Self {
        self.default = Some(v.into());
        self
    }
}

/// Interface of a registered activity.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivitySpec {
    pub name: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub params: Vec<ParamSpec>,
}

impl ActivitySpec {
    pub fn new(name: &str) -> Self {
        ActivitySpec { name: name.to_string(), inputs: Vec::new(), outputs: Vec::new(), params: Vec::new() }
    }

    pub fn input(mut self, slot: &str) -> Self {
        self.inputs.push(slot.to_string());
        self
    }

    pub fn output(mut self, slot: &str) -> Self {
        self.outputs.push(slot.to_string());
        self
    }

    pub fn param(mut self, p: ParamSpec) -> Self {
        self.params.push(p);
        self
    }
}

pub type ActivityFn = Arc<dyn Fn(&mut ActivityContext) -> Result<(), ActivityError> + Send + Sync>;

#[derive(Clone, Default)]
pub struct ActivityRegistry {
    entries: BTreeMap<String, (ActivitySpec, ActivityFn)>,
}

impl fmt::Debug for ActivityRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

impl ActivityRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, spec: ActivitySpec, f: F) -> Result<(), PipelineError>
    where
        F: Fn(&mut ActivityContext) -> Result<(), ActivityError> + Send + Sync + 'static,
    {
        if self.entries.contains_key(&spec.name) {
            return Err(PipelineError::DuplicateActivity { activity: spec.name });
        }
        self.entries.insert(spec.name.clone(), (spec, Arc::new(f)));
        Ok(())
    }

    pub fn spec(&self, name: &str) -> Option<&ActivitySpec> {
        self.entries.get(name).map(|e| &e.0)
    }

    pub(crate) fn function(&self, name: &str) -> Option<ActivityFn> {
        self.entries.get(name).map(|e| e.1.clone())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// What an activity body sees: its inputs, resolved parameters and a
/// buffer for outputs. Outputs are committed by the executor only after the
/// body returns successfully.
#[derive(Debug)]
pub struct ActivityContext {
    pub(crate) node: String,
    pub(crate) attempt: u32,
    pub(crate) inputs: BTreeMap<String, Artifact>,
    pub(crate) params: BTreeMap<String, Value>,
    pub(crate) declared_outputs: BTreeSet<String>,
    pub(crate) outputs: BTreeMap<String, Vec<u8>>,
    pub(crate) logs: Vec<String>,
}

impl ActivityContext {
    pub fn node_id(&self) -> &str {
        &self.node
    }

    /// Zero on the first try, incremented on each retry.
    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    pub fn input(&self, slot: &str) -> Result<Arc<Vec<u8>>, ActivityError> {
        let a = self.inputs.get(slot).ok_or_else(|| format!("undeclared input slot {slot:?}"))?;
        Ok(a.bytes()?)
    }

    pub fn input_str(&self, slot: &str) -> Result<String, ActivityError> {
        Ok(String::from_utf8(self.input(slot)?.to_vec())?)
    }

    pub fn input_uri(&self, slot: &str) -> Option<&ArtifactUri> {
        self.inputs.get(slot).map(Artifact::uri)
    }

    pub fn param(&self, name: &str) -> Option<&Value> {
        self.params.get(name)
    }

    fn typed<T>(&self, name: &str, f: impl Fn(&Value) -> Option<T>) -> Result<T, ActivityError> {
        let v = self.params.get(name).ok_or_else(|| format!("parameter {name:?} not set"))?;
        f(v).ok_or_else(|| format!("parameter {name:?} has unexpected value {v}").into())
    }

    pub fn param_str(&self, name: &str) -> Result<String, ActivityError> {
        self.typed(name, |v| v.as_str().map(str::to_string))
    }

    pub fn param_i64(&self, name: &str) -> Result<i64, ActivityError> {
        self.typed(name, Value::as_i64)
    }

    pub fn param_f64(&self, name: &str) -> Result<f64, ActivityError> {
        self.typed(name, Value::as_f64)
    }

    pub fn param_bool(&self, name: &str) -> Result<bool, ActivityError> {
        self.typed(name, Value::as_bool)
    }

    /// Buffers the payload for a declared output slot.
    pub fn write(&mut self, slot: &str, bytes: impl Into<Vec<u8>>) -> Result<(), ActivityError> {
        if !self.declared_outputs.contains(slot) {
            return Err(format!("undeclared output slot {slot:?}").into());
        }
        if self.outputs.contains_key(slot) {
            return Err(Box::new(PipelineError::AlreadyWritten(slot.to_string())));
        }
        self.outputs.insert(slot.to_string(), bytes.into());
        Ok(())
    }

    pub fn log(&mut self, msg: impl Into<String>) {
        self.logs.push(msg.into());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub activity: String,
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

/// Captured recipe. Node order is the order of definition; artifact edges
/// are implied by matching URIs between outputs and inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeDag {
    pub schema_version: u64,
    pub name: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub nodes: Vec<Node>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl RecipeDag {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// URI → index of the producing node.
    pub fn producers(&self) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for uri in n.outputs.values() {
                m.entry(uri.as_str()).or_insert(i);
            }
        }
        m
    }

    /// Input URIs with no producer, in first-use order.
    pub fn sources(&self) -> Vec<&str> {
        let producers = self.producers();
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for n in &self.nodes {
            for uri in n.inputs.values() {
                if !producers.contains_key(uri.as_str()) && seen.insert(uri.as_str()) {
                    out.push(uri.as_str());
                }
            }
        }
        out
    }

    /// Produced URIs that no node consumes.
    pub fn sinks(&self) -> Vec<&str> {
        let consumed: BTreeSet<&str> = self.nodes.iter().flat_map(|n| n.inputs.values().map(String::as_str)).collect();
        self.nodes.iter().flat_map(|n| n.outputs.values().map(String::as_str)).filter(|u| !consumed.contains(u)).collect()
    }

    /// For each node, the sorted, deduplicated indices of the nodes it waits on.
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let producers = self.producers();
        self.nodes
            .iter()
            .map(|n| {
                let set: BTreeSet<usize> = n.inputs.values().filter_map(|u| producers.get(u.as_str()).copied()).collect();
                set.into_iter().collect()
            })
            .collect()
    }

    pub fn successors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, preds) in self.predecessors().iter().enumerate() {
            for &p in preds {
                out[p].push(i);
            }
        }
        out
    }

    /// Kahn's algorithm, breaking ties by definition order.
    pub fn topo_order(&self) -> Result<Vec<usize>, PipelineError> {
        let preds = self.predecessors();
        let succs = self.successors();
        let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<usize>> = (0..self.nodes.len()).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &s in &succs[i] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.push(Reverse(s));
                }
            }
        }
        if order.len() < self.nodes.len() {
            let mut stuck: Vec<String> =
                (0..self.nodes.len()).filter(|i| indeg[*i] > 0).map(|i| self.nodes[i].id.clone()).collect();
            stuck.sort();
            return Err(PipelineError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Full structural validation against a registry.
    pub fn validate(&self, registry: &ActivityRegistry) -> Result<(), PipelineError> {
        if self.schema_version != DAG_SCHEMA_VERSION {
            return Err(PipelineError::SchemaVersion { found: self.schema_version, expected: DAG_SCHEMA_VERSION });
        }
        let mut declared = BTreeSet::new();
        for p in &self.params {
            if !declared.insert(p.name.as_str()) {
                return Err(PipelineError::DuplicateFlag(p.name.clone()));
            }
            if let Some(d) = &p.default {
                p.kind.check(&p.name, d)?;
            }
        }
        let check_refs = |s: &str| -> Result<(), PipelineError> {
            for r in placeholders(s) {
                if !declared.contains(r) {
                    return Err(PipelineError::UnknownParam(r.to_string()));
                }
            }
            Ok(())
        };

        let mut ids = BTreeSet::new();
        let mut producer: HashMap<&str, &str> = HashMap::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(PipelineError::DuplicateNode(n.id.clone()));
            }
            let spec = registry.spec(&n.activity).ok_or_else(|| PipelineError::UnknownActivity(n.activity.clone()))?;
            let bad = |message: String| PipelineError::BadNode { node: n.id.clone(), message };
            slots_match(&spec.inputs, &n.inputs).map_err(|m| bad(format!("inputs: {m}")))?;
            slots_match(&spec.outputs, &n.outputs).map_err(|m| bad(format!("outputs: {m}")))?;
            for (k, v) in &n.params {
                let Some(ps) = spec.params.iter().find(|p| &p.name == k) else {
                    return Err(bad(format!("activity {} has no parameter {k:?}", spec.name)));
                };
                visit_strings(v, &mut |s| check_refs(s))?;
                if !value_has_placeholder(v) {
                    ps.kind.check(k, v)?;
                }
            }
            if let Some(p) = spec.params.iter().find(|p| p.default.is_none() && !n.params.contains_key(&p.name)) {
                return Err(bad(format!("missing parameter {:?}", p.name)));
            }
            for uri in n.inputs.values().chain(n.outputs.values()) {
                ArtifactUri::parse(uri)?;
                check_refs(uri)?;
            }
            for uri in n.outputs.values() {
                if let Some(first) = producer.insert(uri.as_str(), n.id.as_str()) {
                    return Err(PipelineError::MultipleProducers {
                        uri: uri.clone(),
                        first: first.to_string(),
                        second: n.id.clone(),
                    });
                }
            }
        }
        self.topo_order()?;
        for out in &self.outputs {
            if !producer.contains_key(out.as_str()) {
                return Err(PipelineError::MissingArtifact(out.clone()));
            }
        }
        for sink in self.sinks() {
            if !self.outputs.iter().any(|o| o == sink) {
                let node = producer[sink].to_string();
                return Err(PipelineError::BadNode { node, message: format!("sink {sink} is not a recipe output") });
            }
        }
        Ok(())
    }
}

fn slots_match(declared: &[String], wired: &BTreeMap<String, String>) -> Result<(), String> {
    if let Some(s) = declared.iter().find(|s| !wired.contains_key(*s)) {
        return Err(format!("slot {s:?} is not wired"));
    }
    if let Some(s) = wired.keys().find(|s| !declared.contains(s)) {
        return Err(format!("slot {s:?} is not declared by the activity"));
    }
    Ok(())
}

/// Names referenced as `${name}` in `s`.
pub(crate) fn placeholders(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(i) = rest.find("${") {
        let after = &rest[i + 2..];
        match after.find('}') {
            Some(j) => {
                out.push(&after[..j]);
                rest = &after[j + 1..];
            }
            None => break,
        }
    }
    out
}

fn value_has_placeholder(v: &Value) -> bool {
    let mut found = false;
    let _ = visit_strings(v, &mut |s| {
        found |= !placeholders(s).is_empty();
        Ok(())
    });
    found
}

fn visit_strings(v: &Value, f: &mut dyn FnMut(&str) -> Result<(), PipelineError>) -> Result<(), PipelineError> {
    match v {
        Value::String(s) => f(s),
        Value::Array(a) => a.iter().try_for_each(|x| visit_strings(x, f)),
        Value::Object(m) => m.values().try_for_each(|x| visit_strings(x, f)),
        _ => Ok(()),
    }
}

fn display_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Replaces every `${name}` in `s` with the resolved parameter.
pub(crate) fn substitute(s: &str, params: &BTreeMap<String, Value>) -> Result<String, PipelineError> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find("${") {
        let after = &rest[i + 2..];
        let Some(j) = after.find('}') else { break };
        let name = &after[..j];
        let v = params.get(name).ok_or_else(|| PipelineError::UnknownParam(name.to_string()))?;
        out.push_str(&rest[..i]);
        out.push_str(&display_value(v));
        rest = &after[j + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Like [`substitute`], but a string that is exactly one placeholder takes
/// the parameter's typed value.
pub(crate) fn substitute_value(v: &Value, params: &BTreeMap<String, Value>) -> Result<Value, PipelineError> {
    Ok(match v {
        Value::String(s) => {
            let refs = placeholders(s);
            if refs.len() == 1 && s.len() == refs[0].len() + 3 {
                params.get(refs[0]).cloned().ok_or_else(|| PipelineError::UnknownParam(refs[0].to_string()))?
            } else {
                Value::String(substitute(s, params)?)
            }
        }
        Value::Array(a) => Value::Array(a.iter().map(|x| substitute_value(x, params)).collect::<Result<_, _>>()?),
        Value::Object(m) => {
            Value::Object(m.iter().map(|(k, x)| Ok((k.clone(), substitute_value(x, params)?))).collect::<Result<_, PipelineError>>()?)
        }
        other => other.clone(),
    })
}

impl RecipeDag {
    /// Merges overrides with defaults and checks types.
    pub fn resolve_params(&self, overrides: &BTreeMap<String, Value>) -> Result<BTreeMap<String, Value>, PipelineError> {
        if let Some(k) = overrides.keys().find(|k| !self.params.iter().any(|p| &p.name == *k)) {
            return Err(PipelineError::UnknownParam(k.clone()));
        }
        let mut out = BTreeMap::new();
        for p in &self.params {
            let v = overrides
                .get(&p.name)
                .or(p.default.as_ref())
                .cloned()
                .ok_or_else(|| PipelineError::MissingParam(p.name.clone()))?;
            p.kind.check(&p.name, &v)?;
            out.insert(p.name.clone(), v);
        }
        Ok(out)
    }
}

/// Declarative recipe definition. `build` validates and returns the DAG.
#[derive(Debug, Clone)]
pub struct RecipeBuilder {
    dag: RecipeDag,
}

pub struct NodeBuilder<'a> {
    node: &'a mut Node,
}

impl NodeBuilder<'_> {
    pub fn input(self, slot: &str, uri: &str) -> Self {
        self.node.inputs.insert(slot.to_string(), uri.to_string());
        self
    }

    pub fn output(self, slot: &str, uri: &str) -> Self {
        self.node.outputs.insert(slot.to_string(), uri.to_string());
        self
    }

    pub fn param(self, name: &str, v: impl Into<Value>) -> Self {
        self.node.params.insert(name.to_string(), v.into());
        self
    }
}

impl RecipeBuilder {
    pub fn new(name: &str) -> Self {
        RecipeBuilder {
            dag: RecipeDag {
                schema_version: DAG_SCHEMA_VERSION,
                name: name.to_string(),
                params: Vec::new(),
                nodes: Vec::new(),
                outputs: Vec::new(),
            },
        }
    }

    pub fn param(&mut self, spec: ParamSpec) -> &mut Self {
        self.dag.params.push(spec);
        self
    }

    pub fn node(&mut self, id: &str, activity: &str) -> NodeBuilder<'_> {
        self.dag.nodes.push(Node {
            id: id.to_string(),
            activity: activity.to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            params: BTreeMap::new(),
        });
        NodeBuilder { node: self.dag.nodes.last_mut().expect("just pushed") }
    }

    /// Declares an artifact as a recipe output. Sinks are added implicitly.
    pub fn output(&mut self, uri: &str) -> &mut Self {
        if !self.dag.outputs.iter().any(|o| o == uri) {
            self.dag.outputs.push(uri.to_string());
        }
        self
    }

    pub fn build(&self, registry: &ActivityRegistry) -> Result<RecipeDag, PipelineError> {
        let mut dag = self.dag.clone();
        let sinks: Vec<String> = dag.sinks().into_iter().map(str::to_string).collect();
        for s in sinks {
            if !dag.outputs.contains(&s) {
                dag.outputs.push(s);
            }
        }
        dag.validate(registry)?;
        Ok(dag)
    }
}

pub fn serialize_dag(dag: &RecipeDag) -> String {
    serde_json::to_string_pretty(dag).expect("DAG values are always serializable")
}

/// Parses and validates a DAG. The schema version is checked before the
/// rest of the document is interpreted.
pub fn deserialize_dag(text: &str, registry: &ActivityRegistry) -> Result<RecipeDag, PipelineError> {
    let raw: Value = serde_json::from_str(text)?;
    let found = raw.get("schema_version").and_then(Value::as_u64).unwrap_or(0);
    if found != DAG_SCHEMA_VERSION {
        return Err(PipelineError::SchemaVersion { found, expected: DAG_SCHEMA_VERSION });
    }
    let dag: RecipeDag = serde_json::from_value(raw)?;
    dag.validate(registry)?;
    Ok(dag)
}
