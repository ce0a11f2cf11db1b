//! The developer-facing skill definition: intent schema, custom slot types,
//! sample utterances and the invocation name.
//!
//! Parsing is strict about syntax (malformed JSON, unbalanced braces) and
//! lenient about semantics; semantic defects are reported by
//! [`validate_interaction_model`] as located violations instead of errors.

mod samples;
mod schema;
mod slot_types;
mod validate;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use samples::{format_sample_utterances, parse_sample_utterances, parse_template};
pub use schema::parse_intent_schema;
pub use slot_types::{parse_slot_type_json, parse_slot_type_lines, BuiltinSlotTypes, SlotCatalog};
pub use validate::{validate_interaction_model, Location, ValidationReport, Violation, ViolationKind};

pub const SCHEMA_FILE: &str = "intent_schema.json";
pub const SAMPLES_FILE: &str = "sample_utterances.txt";
pub const SLOT_TYPES_DIR: &str = "slot_types";
pub const INVOCATION_FILE: &str = "invocation_name.txt";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("intent schema is missing the \"intents\" array")]
    MissingIntents,
    #[error("intent #{index} is missing its \"intent\" name")]
    MissingIntentName { index: usize },
    #[error("duplicate intent name {0:?}")]
    DuplicateIntent(String),
    #[error("slot #{index} of intent {intent:?} is missing {field:?}")]
    SlotMissingField { intent: String, index: usize, field: &'static str },
    #[error("duplicate slot {slot:?} in intent {intent:?}")]
    DuplicateSlot { intent: String, slot: String },
    #[error("line {line}: {message}")]
    Sample { line: usize, message: String },
    #[error("slot type {0:?}: expected {{\"name\": ..., \"values\": [...]}}")]
    SlotTypeShape(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ModelError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDecl {
    pub name: String,
    pub slot_type: String,
    /// Dialogue extension: the slot must be filled before fulfillment.
    #[serde(default)]
    pub required: bool,
    /// Dialogue extension: elicitation prompt.
    #[serde(default)]
    pub prompt: Option<String>,
}

impl SlotDecl {
    pub fn new(name: impl Into<String>, slot_type: impl Into<String>) -> Self {
        SlotDecl { name: name.into(), slot_type: slot_type.into(), required: false, prompt: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentDecl {
    pub name: String,
    pub slots: Vec<SlotDecl>,
    #[serde(default)]
    pub confirmation_required: bool,
    #[serde(default)]
    pub confirmation_prompt: Option<String>,
}

impl IntentDecl {
    pub fn new(name: impl Into<String>, slots: Vec<SlotDecl>) -> Self {
        IntentDecl { name: name.into(), slots, confirmation_required: false, confirmation_prompt: None }
    }

    pub fn slot(&self, name: &str) -> Option<&SlotDecl> {
        self.slots.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSchema {
    pub intents: Vec<IntentDecl>,
}

impl IntentSchema {
    pub fn intent(&self, name: &str) -> Option<&IntentDecl> {
        self.intents.iter().find(|i| i.name == name)
    }

    /// Serializes back to the developer JSON layout. Dialogue extension keys
    /// are only written when set, so plain schemas round-trip unchanged.
    pub fn to_json(&self) -> String {
        schema::schema_to_json(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustomSlotType {
    pub name: String,
    pub values: Vec<String>,
}

impl CustomSlotType {
    pub fn new<S: Into<String>>(name: impl Into<String>, values: impl IntoIterator<Item = S>) -> Self {
        CustomSlotType { name: name.into(), values: values.into_iter().map(Into::into).collect() }
    }

    /// Normalized values in declaration order, empties and duplicates removed.
    pub fn normalized_values(&self) -> Vec<String> {
        dedup_normalized(&self.values)
    }
}

pub(crate) fn dedup_normalized(values: &[String]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    values
        .iter()
        .map(|v| crate::text::normalize_phrase(v))
        .filter(|v| !v.is_empty() && seen.insert(v.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateToken {
    Word(String),
    Slot(String),
}

impl std::fmt::Display for TemplateToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TemplateToken::Word(w) => f.write_str(w),
            TemplateToken::Slot(s) => write!(f, "{{{s}}}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub intent: String,
    pub template: Vec<TemplateToken>,
    /// 1-based source line, when parsed from a file.
    #[serde(default)]
    pub line: Option<usize>,
}

impl LabeledUtterance {
    pub fn new(intent: impl Into<String>, template: Vec<TemplateToken>) -> Self {
        LabeledUtterance { intent: intent.into(), template, line: None }
    }

    pub fn slot_refs(&self) -> impl Iterator<Item = &str> {
        self.template.iter().filter_map(|t| match t {
            TemplateToken::Slot(s) => Some(s.as_str()),
            TemplateToken::Word(_) => None,
        })
    }

    pub fn template_text(&self) -> String {
        self.template.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionModel {
    pub schema: IntentSchema,
    pub slot_types: Vec<CustomSlotType>,
    pub samples: Vec<LabeledUtterance>,
    pub invocation_name: String,
}

impl InteractionModel {
    /// Loads a model directory:
    ///
    /// ```text
    /// intent_schema.json
    /// sample_utterances.txt
    /// invocation_name.txt      (optional)
    /// slot_types/NAME.json     {"name": ..., "values": [...]}
    /// slot_types/NAME.txt      one value per line
    /// ```
    pub fn load_dir(dir: &Path) -> Result<Self, ModelError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| ModelError::io(&path, e))
        };
        let schema = parse_intent_schema(&read(SCHEMA_FILE)?)?;
        let samples = parse_sample_utterances(&read(SAMPLES_FILE)?)?;
        let invocation_name = match fs::read_to_string(dir.join(INVOCATION_FILE)) {
            Ok(s) => s.trim().to_string(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(ModelError::io(&dir.join(INVOCATION_FILE), e)),
        };

        let mut slot_types = Vec::new();
        let types_dir = dir.join(SLOT_TYPES_DIR);
        if types_dir.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&types_dir)
                .map_err(|e| ModelError::io(&types_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            for path in entries {
                let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
                let body = || fs::read_to_string(&path).map_err(|e| ModelError::io(&path, e));
                match ext {
                    "json" => slot_types.push(parse_slot_type_json(&body()?)?),
                    "txt" => slot_types.push(parse_slot_type_lines(&stem, &body()?)),
                    _ => {}
                }
            }
        }

        Ok(InteractionModel { schema, slot_types, samples, invocation_name })
    }

    /// Writes the model back out in the directory layout read by [`Self::load_dir`].
    pub fn write_dir(&self, dir: &Path) -> Result<(), ModelError> {
        let write = |path: PathBuf, body: String| fs::write(&path, body).map_err(|e| ModelError::io(&path, e));
        fs::create_dir_all(dir.join(SLOT_TYPES_DIR)).map_err(|e| ModelError::io(dir, e))?;
        write(dir.join(SCHEMA_FILE), self.schema.to_json())?;
        write(dir.join(SAMPLES_FILE), format_sample_utterances(&self.samples))?;
        write(dir.join(INVOCATION_FILE), format!("{}\n", self.invocation_name))?;
        for st in &self.slot_types {
            let body = serde_json::json!({"name": st.name, "values": st.values});
            write(dir.join(SLOT_TYPES_DIR).join(format!("{}.json", st.name)), format!("{body:#}\n"))?;
        }
        Ok(())
    }

    pub fn slot_type(&self, name: &str) -> Option<&CustomSlotType> {
        self.slot_types.iter().find(|t| t.name == name)
    }

    pub fn samples_for<'a>(&'a self, intent: &'a str) -> impl Iterator<Item = &'a LabeledUtterance> + 'a {
        self.samples.iter().filter(move |s| s.intent == intent)
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("model serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}
