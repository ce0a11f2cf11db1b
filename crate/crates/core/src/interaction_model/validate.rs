use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BuiltinSlotTypes, InteractionModel};
use crate::text::{is_identifier, normalize_phrase};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "at", rename_all = "snake_case")]
pub enum Location {
    Schema,
    Intent { intent: String },
    Slot { intent: String, slot: String },
    SlotType { slot_type: String },
    Sample { index: usize, line: Option<usize> },
    InvocationName,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Schema => write!(f, "schema"),
            Location::Intent { intent } => write!(f, "intent {intent}"),
            Location::Slot { intent, slot } => write!(f, "slot {intent}.{slot}"),
            Location::SlotType { slot_type } => write!(f, "slot type {slot_type}"),
            Location::Sample { index, line: Some(line) } => write!(f, "sample #{index} (line {line})"),
            Location::Sample { index, line: None } => write!(f, "sample #{index}"),
            Location::InvocationName => write!(f, "invocation name"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NoIntents,
    InvalidIdentifier,
    DuplicateIntent,
    DuplicateSlot,
    UnknownSlotType,
    EmptySlotType,
    DuplicateSlotValue,
    UndeclaredIntent,
    UnresolvedSlotReference,
    RepeatedSlotReference,
    EmptyTemplate,
    IntentWithoutSamples,
    InvalidInvocationName,
}

impl ViolationKind {
    pub fn describe(self) -> &'static str {
        match self {
            ViolationKind::NoIntents => "schema declares no intents",
            ViolationKind::InvalidIdentifier => "invalid identifier",
            ViolationKind::DuplicateIntent => "duplicate intent name",
            ViolationKind::DuplicateSlot => "duplicate slot name",
            ViolationKind::UnknownSlotType => "unknown slot type",
            ViolationKind::EmptySlotType => "slot type has no values",
            ViolationKind::DuplicateSlotValue => "duplicate slot value after normalization",
            ViolationKind::UndeclaredIntent => "sample labelled with undeclared intent",
            ViolationKind::UnresolvedSlotReference => "unresolved slot reference",
            ViolationKind::RepeatedSlotReference => "slot referenced more than once in a sample",
            ViolationKind::EmptyTemplate => "sample has an empty template",
            ViolationKind::IntentWithoutSamples => "intent has no sample utterances",
            ViolationKind::InvalidInvocationName => "invocation name must be lowercase letters and spaces",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub location: Location,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.kind.describe())?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    /// A model is buildable iff the report is empty.
    pub fn is_buildable(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, location: Location, detail: impl Into<String>) {
        self.violations.push(Violation { kind, location, detail: detail.into() });
    }
}

/// Checks the whole-model contract. Never fails: every defect becomes a
/// located violation.
pub fn validate_interaction_model(model: &InteractionModel, builtins: &BuiltinSlotTypes) -> ValidationReport {
    let mut report = ValidationReport::default();
    let schema = &model.schema;

    if schema.intents.is_empty() {
        report.push(ViolationKind::NoIntents, Location::Schema, "");
    }

    let mut custom_types: HashMap<&str, usize> = HashMap::new();
    for st in &model.slot_types {
        let loc = || Location::SlotType { slot_type: st.name.clone() };
        if !is_identifier(&st.name) {
            report.push(ViolationKind::InvalidIdentifier, loc(), st.name.clone());
        }
        *custom_types.entry(st.name.as_str()).or_default() += 1;
        let mut seen = HashSet::new();
        let mut any = false;
        for v in &st.values {
            let norm = normalize_phrase(v);
            if norm.is_empty() {
                continue;
            }
            any = true;
            if !seen.insert(norm.clone()) {
                report.push(ViolationKind::DuplicateSlotValue, loc(), norm);
            }
        }
        if !any {
            report.push(ViolationKind::EmptySlotType, loc(), "");
        }
    }

    let mut intent_names = HashSet::new();
    for intent in &schema.intents {
        let loc = || Location::Intent { intent: intent.name.clone() };
        if !is_identifier(&intent.name) {
            report.push(ViolationKind::InvalidIdentifier, loc(), intent.name.clone());
        }
        if !intent_names.insert(intent.name.as_str()) {
            report.push(ViolationKind::DuplicateIntent, loc(), "");
        }
        let mut slot_names = HashSet::new();
        for slot in &intent.slots {
            let sloc = || Location::Slot { intent: intent.name.clone(), slot: slot.name.clone() };
            if !is_identifier(&slot.name) {
                report.push(ViolationKind::InvalidIdentifier, sloc(), slot.name.clone());
            }
            if !slot_names.insert(slot.name.as_str()) {
                report.push(ViolationKind::DuplicateSlot, sloc(), "");
            }
            let resolved = custom_types.contains_key(slot.slot_type.as_str()) || builtins.get(&slot.slot_type).is_some();
            if !resolved {
                report.push(ViolationKind::UnknownSlotType, sloc(), slot.slot_type.clone());
            }
        }
    }

    let mut sample_counts: HashMap<&str, usize> = HashMap::new();
    for (index, sample) in model.samples.iter().enumerate() {
        let loc = || Location::Sample { index, line: sample.line };
        let Some(intent) = schema.intent(&sample.intent) else {
            report.push(ViolationKind::UndeclaredIntent, loc(), sample.intent.clone());
            continue;
        };
        *sample_counts.entry(intent.name.as_str()).or_default() += 1;
        if sample.template.is_empty() {
            report.push(ViolationKind::EmptyTemplate, loc(), "");
        }
        let mut refs = HashSet::new();
        for slot in sample.slot_refs() {
            if intent.slot(slot).is_none() {
                report.push(ViolationKind::UnresolvedSlotReference, loc(), format!("{{{slot}}}"));
            } else if !refs.insert(slot) {
                report.push(ViolationKind::RepeatedSlotReference, loc(), format!("{{{slot}}}"));
            }
        }
    }
    for intent in &schema.intents {
        if sample_counts.get(intent.name.as_str()).copied().unwrap_or(0) == 0 {
            report.push(ViolationKind::IntentWithoutSamples, Location::Intent { intent: intent.name.clone() }, "");
        }
    }

    let inv = model.invocation_name.trim();
    let valid_invocation =
        !inv.is_empty() && inv.chars().all(|c| c.is_ascii_lowercase() || c == ' ') && inv.chars().any(|c| c != ' ');
    if !valid_invocation {
        report.push(ViolationKind::InvalidInvocationName, Location::InvocationName, model.invocation_name.clone());
    }

    report
}
