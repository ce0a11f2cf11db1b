//! A small meaning-representation ontology: entity types possess
//! properties, actions require them. Builtin intents are compiled by binding
//! entity types to an action's required properties and expanding the
//! action's carrier templates.
//!
//! The bundled ontology (`data/ontology.json`) is an illustrative fixture;
//! its actions, entities and carrier templates are invented examples.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interaction_model::{
    parse_template, CustomSlotType, IntentDecl, IntentSchema, InteractionModel, LabeledUtterance, SlotDecl,
    TemplateToken,
};

const BUNDLED_ONTOLOGY: &str = include_str!("../data/ontology.json");

#[derive(Debug, Error, PartialEq)]
pub enum OntologyError {
    #[error("malformed ontology JSON: {0}")]
    Json(String),
    #[error("duplicate {kind} {name:?}")]
    Duplicate { kind: &'static str, name: String },
    #[error("entity {entity:?} lists undeclared property {property:?}")]
    UndeclaredProperty { entity: String, property: String },
    #[error("action {action:?} template {template:?}: {message}")]
    Template { action: String, template: String, message: String },
    #[error("{property:?} is not a required property of {action}")]
    UnknownProperty { action: String, property: String },
    #[error("action {0} has no surface forms")]
    NoSurfaceForms(String),
    #[error("incompatible binding for {action}: missing {missing:?}")]
    Incompatible { action: String, missing: Vec<String> },
    #[error("carrier template of {action} references unbound property {property:?}")]
    UnboundTemplateProperty { action: String, property: String },
    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyDecl {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityType {
    pub name: String,
    pub properties: BTreeSet<String>,
    #[serde(rename = "values")]
    pub sample_values: Vec<String>,
}

impl EntityType {
    pub fn has(&self, property: &str) -> bool {
        self.properties.contains(property)
    }
}

/// A semantic role of an action, satisfied by entities possessing `requires`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequiredProperty {
    pub name: String,
    pub requires: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionTemplate {
    pub name: String,
    pub required_properties: Vec<RequiredProperty>,
    pub carrier_templates: Vec<Vec<TemplateToken>>,
}

impl ActionTemplate {
    /// Validates that every placeholder names a required property.
    pub fn new(
        name: impl Into<String>,
        required_properties: Vec<RequiredProperty>,
        templates: &[&str],
    ) -> Result<Self, OntologyError> {
        let name = name.into();
        let mut carrier_templates = Vec::new();
        for t in templates {
            let err = |message: String| OntologyError::Template {
                action: name.clone(),
                template: t.to_string(),
                message,
            };
            let parsed = parse_template(t).map_err(err)?;
            for tok in &parsed {
                if let TemplateToken::Slot(p) = tok {
                    if !required_properties.iter().any(|r| &r.name == p) {
                        return Err(err(format!("placeholder {{{p}}} is not a required property")));
                    }
                }
            }
            carrier_templates.push(parsed);
        }
        let mut seen = HashSet::new();
        for r in &required_properties {
            if !seen.insert(r.name.as_str()) {
                return Err(OntologyError::Duplicate { kind: "required property", name: r.name.clone() });
            }
        }
        Ok(ActionTemplate { name, required_properties, carrier_templates })
    }

    pub fn required(&self, property: &str) -> Option<&RequiredProperty> {
        self.required_properties.iter().find(|r| r.name == property)
    }

    /// Required properties that appear in at least one carrier template, in
    /// declaration order.
    pub fn template_properties(&self) -> Vec<&RequiredProperty> {
        let used: HashSet<&str> = self
            .carrier_templates
            .iter()
            .flatten()
            .filter_map(|t| match t {
                TemplateToken::Slot(s) => Some(s.as_str()),
                TemplateToken::Word(_) => None,
            })
            .collect();
        self.required_properties.iter().filter(|r| used.contains(r.name.as_str())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compatibility {
    Compatible,
    /// Every bound entity fits but some required properties are unbound.
    Incomplete,
    /// At least one bound entity lacks the property its role requires.
    Incompatible,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingReason {
    Unbound,
    Lacking { entity: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingProperty {
    pub role: String,
    pub requires: String,
    pub reason: MissingReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatibilityResult {
    pub status: Compatibility,
    pub missing: Vec<MissingProperty>,
}

impl CompatibilityResult {
    pub fn is_compatible(&self) -> bool {
        self.status == Compatibility::Compatible
    }

    /// The properties that are missing, by the name entities would have to possess.
    pub fn missing_properties(&self) -> Vec<&str> {
        self.missing.iter().map(|m| m.requires.as_str()).collect()
    }
}

pub type Binding<'a> = BTreeMap<String, &'a EntityType>;

pub fn check_compatibility(action: &ActionTemplate, binding: &Binding<'_>) -> Result<CompatibilityResult, OntologyError> {
    for key in binding.keys() {
        if action.required(key).is_none() {
            return Err(OntologyError::UnknownProperty { action: action.name.clone(), property: key.clone() });
        }
    }
    let mut missing = Vec::new();
    let mut lacking = false;
    for req in &action.required_properties {
        match binding.get(&req.name) {
            None => missing.push(MissingProperty {
                role: req.name.clone(),
                requires: req.requires.clone(),
                reason: MissingReason::Unbound,
            }),
            Some(entity) if !entity.has(&req.requires) => {
                lacking = true;
                missing.push(MissingProperty {
                    role: req.name.clone(),
                    requires: req.requires.clone(),
                    reason: MissingReason::Lacking { entity: entity.name.clone() },
                });
            }
            Some(_) => {}
        }
    }
    let status = if lacking {
        Compatibility::Incompatible
    } else if missing.is_empty() {
        Compatibility::Compatible
    } else {
        Compatibility::Incomplete
    };
    Ok(CompatibilityResult { status, missing })
}

/// A builtin intent produced from an action template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledIntent {
    pub intent: IntentDecl,
    pub slot_types: Vec<CustomSlotType>,
    pub samples: Vec<LabeledUtterance>,
}

impl CompiledIntent {
    /// Wraps the compiled intent as a standalone interaction model.
    pub fn into_model(self, invocation_name: impl Into<String>) -> InteractionModel {
        InteractionModel {
            schema: IntentSchema { intents: vec![self.intent] },
            slot_types: self.slot_types,
            samples: self.samples,
            invocation_name: invocation_name.into(),
        }
    }

    /// Adds the compiled intent to an existing model, sharing entity slot types.
    pub fn merge_into(self, model: &mut InteractionModel) {
        for st in self.slot_types {
            if model.slot_type(&st.name).is_none() {
                model.slot_types.push(st);
            }
        }
        model.schema.intents.push(self.intent);
        model.samples.extend(self.samples);
    }
}

pub fn compile_builtin_intent(action: &ActionTemplate, binding: &Binding<'_>) -> Result<CompiledIntent, OntologyError> {
    if action.carrier_templates.is_empty() {
        return Err(OntologyError::NoSurfaceForms(action.name.clone()));
    }
    let compat = check_compatibility(action, binding)?;
    let used = action.template_properties();
    let mut missing = Vec::new();
    for req in &used {
        match binding.get(&req.name) {
            None => {
                return Err(OntologyError::UnboundTemplateProperty {
                    action: action.name.clone(),
                    property: req.name.clone(),
                })
            }
            Some(_) => {
                if compat.missing.iter().any(|m| m.role == req.name) {
                    missing.push(req.requires.clone());
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(OntologyError::Incompatible { action: action.name.clone(), missing });
    }

    let bound_names: Vec<&str> = action
        .required_properties
        .iter()
        .filter_map(|r| binding.get(&r.name).map(|e| e.name.as_str()))
        .collect();
    let intent_name = std::iter::once(action.name.as_str()).chain(bound_names).collect::<Vec<_>>().join(".");

    let mut slots = Vec::new();
    let mut slot_types: Vec<CustomSlotType> = Vec::new();
    for req in used {
        let entity = binding[&req.name];
        slots.push(SlotDecl::new(req.name.clone(), entity.name.clone()));
        if !slot_types.iter().any(|t| t.name == entity.name) {
            slot_types.push(CustomSlotType::new(entity.name.clone(), entity.sample_values.iter().cloned()));
        }
    }
    let samples = action
        .carrier_templates
        .iter()
        .map(|t| LabeledUtterance::new(intent_name.clone(), t.clone()))
        .collect();
    Ok(CompiledIntent { intent: IntentDecl::new(intent_name, slots), slot_types, samples })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    pub properties: Vec<PropertyDecl>,
    pub entities: Vec<EntityType>,
    pub actions: Vec<ActionTemplate>,
}

#[derive(Deserialize)]
struct RawAction {
    name: String,
    #[serde(default)]
    properties: Vec<RequiredProperty>,
    #[serde(default)]
    templates: Vec<String>,
}

#[derive(Deserialize)]
struct RawOntology {
    #[serde(default)]
    properties: Vec<PropertyDecl>,
    #[serde(default)]
    entities: Vec<EntityType>,
    #[serde(default)]
    actions: Vec<RawAction>,
}

impl Ontology {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_ONTOLOGY).expect("bundled ontology is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, OntologyError> {
        let raw: RawOntology = serde_json::from_str(text).map_err(|e| OntologyError::Json(e.to_string()))?;
        let mut declared = HashSet::new();
        for p in &raw.properties {
            if !declared.insert(p.name.clone()) {
                return Err(OntologyError::Duplicate { kind: "property", name: p.name.clone() });
            }
        }
        let mut names = HashSet::new();
        for e in &raw.entities {
            if !names.insert(e.name.clone()) {
                return Err(OntologyError::Duplicate { kind: "entity", name: e.name.clone() });
            }
            if let Some(p) = e.properties.iter().find(|p| !declared.contains(*p)) {
                return Err(OntologyError::UndeclaredProperty { entity: e.name.clone(), property: p.clone() });
            }
        }
        let mut actions = Vec::new();
        let mut action_names = HashSet::new();
        for a in raw.actions {
            if !action_names.insert(a.name.clone()) {
                return Err(OntologyError::Duplicate { kind: "action", name: a.name });
            }
            let templates: Vec<&str> = a.templates.iter().map(String::as_str).collect();
            actions.push(ActionTemplate::new(a.name, a.properties, &templates)?);
        }
        Ok(Ontology { properties: raw.properties, entities: raw.entities, actions })
    }

    pub fn entity(&self, name: &str) -> Result<&EntityType, OntologyError> {
        self.entities
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| OntologyError::Unknown { kind: "entity", name: name.to_string() })
    }

    pub fn action(&self, name: &str) -> Result<&ActionTemplate, OntologyError> {
        self.actions
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| OntologyError::Unknown { kind: "action", name: name.to_string() })
    }

    /// Builds a binding from `(property, entity name)` pairs.
    pub fn bind<'a>(&'a self, pairs: &[(&str, &str)]) -> Result<Binding<'a>, OntologyError> {
        pairs.iter().map(|(p, e)| Ok((p.to_string(), self.entity(e)?))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction_model::{validate_interaction_model, BuiltinSlotTypes};
    use proptest::prelude::*;

    #[test]
    fn call_action_requires_callable() {
        let o = Ontology::bundled();
        let call = o.action("CallAction").unwrap();
        let r = check_compatibility(call, &o.bind(&[("callee", "Color")]).unwrap()).unwrap();
        assert_eq!(r.status, Compatibility::Incompatible);
        assert_eq!(r.missing_properties(), vec!["Callable"]);
        assert!(check_compatibility(call, &o.bind(&[("callee", "Person")]).unwrap()).unwrap().is_compatible());
    }

    #[test]
    fn add_action_grocery_shopping_list() {
        let o = Ontology::bundled();
        let add = o.action("AddAction").unwrap();
        let binding = o.bind(&[("object", "GroceryItem"), ("targetCollection", "ShoppingList")]).unwrap();
        assert!(o.entity("GroceryItem").unwrap().has("addable"));
        assert!(o.entity("ShoppingList").unwrap().has("itemList"));
        let r = check_compatibility(add, &binding).unwrap();
        assert!(r.is_compatible());
        assert!(r.missing.is_empty());
    }

    #[test]
    fn empty_binding_is_incomplete() {
        let o = Ontology::bundled();
        let add = o.action("AddAction").unwrap();
        let r = check_compatibility(add, &Binding::new()).unwrap();
        assert_eq!(r.status, Compatibility::Incomplete);
        assert_eq!(r.missing_properties(), vec!["addable", "itemList"]);
        assert!(r.missing.iter().all(|m| m.reason == MissingReason::Unbound));
    }

    #[test]
    fn unknown_binding_key() {
        let o = Ontology::bundled();
        let err = check_compatibility(o.action("CallAction").unwrap(), &o.bind(&[("nope", "Person")]).unwrap());
        assert!(matches!(err, Err(OntologyError::UnknownProperty { .. })));
    }

    #[test]
    fn compile_search_action() {
        let o = Ontology::bundled();
        let search = o.action("SearchAction").unwrap();
        let binding =
            o.bind(&[("object", "WeatherForecast"), ("location", "City"), ("startDate", "Date")]).unwrap();
        let compiled = compile_builtin_intent(search, &binding).unwrap();
        assert_eq!(compiled.intent.name, "SearchAction.WeatherForecast.City.Date");
        let slots: Vec<_> = compiled.intent.slots.iter().map(|s| (s.name.as_str(), s.slot_type.as_str())).collect();
        assert_eq!(slots, vec![("location", "City"), ("startDate", "Date")]);
        let model = compiled.into_model("weather");
        assert!(validate_interaction_model(&model, &BuiltinSlotTypes::empty()).is_buildable());
    }

    #[test]
    fn compile_add_action_samples() {
        let o = Ontology::bundled();
        let add = o.action("AddAction").unwrap();
        let binding = o.bind(&[("object", "GroceryItem"), ("targetCollection", "ShoppingList")]).unwrap();
        let compiled = compile_builtin_intent(add, &binding).unwrap();
        let with_both = compiled
            .samples
            .iter()
            .filter(|s| {
                let refs: Vec<_> = s.slot_refs().collect();
                refs.contains(&"object") && refs.contains(&"targetCollection")
            })
            .count();
        // carrier templates: two mention both roles, one only {object}
        assert_eq!(with_both, 2);
        assert_eq!(compiled.samples.len(), 3);
    }

    #[test]
    fn compile_errors() {
        let o = Ontology::bundled();
        let empty = ActionTemplate::new(
            "EmptyAction",
            vec![RequiredProperty { name: "object".into(), requires: "searchable".into(), description: String::new() }],
            &[],
        )
        .unwrap();
        assert_eq!(
            compile_builtin_intent(&empty, &Binding::new()),
            Err(OntologyError::NoSurfaceForms("EmptyAction".into()))
        );
        let add = o.action("AddAction").unwrap();
        assert!(matches!(
            compile_builtin_intent(add, &o.bind(&[("object", "GroceryItem")]).unwrap()),
            Err(OntologyError::UnboundTemplateProperty { .. })
        ));
        assert!(matches!(
            compile_builtin_intent(add, &o.bind(&[("object", "Color"), ("targetCollection", "ShoppingList")]).unwrap()),
            Err(OntologyError::Incompatible { .. })
        ));
        assert!(ActionTemplate::new("Bad", vec![], &["say {thing}"]).is_err());
    }

    #[test]
    fn every_compatible_compilation_validates() {
        let o = Ontology::bundled();
        let builtins = BuiltinSlotTypes::empty();
        for action in &o.actions {
            let roles = action.template_properties();
            // bind each role to the first entity that fits
            let mut binding = Binding::new();
            for r in &roles {
                if let Some(e) = o.entities.iter().find(|e| e.has(&r.requires)) {
                    binding.insert(r.name.clone(), e);
                }
            }
            if let Ok(compiled) = compile_builtin_intent(action, &binding) {
                let report = validate_interaction_model(&compiled.into_model("fixture"), &builtins);
                assert!(report.is_buildable(), "{}: {:?}", action.name, report.violations);
            }
        }
    }

    proptest! {
        #[test]
        fn compatibility_is_monotone(action_idx in 0usize..7, picks in proptest::collection::vec(0usize..12, 3), extra in proptest::collection::vec(0usize..10, 0..4)) {
            let o = Ontology::bundled();
            let action = &o.actions[action_idx % o.actions.len()];
            let mut owned: Vec<EntityType> = Vec::new();
            let mut roles = Vec::new();
            for (req, pick) in action.required_properties.iter().zip(&picks) {
                owned.push(o.entities[pick % o.entities.len()].clone());
                roles.push(req.name.clone());
            }
            let before: Binding = roles.iter().cloned().zip(owned.iter()).collect();
            let r1 = check_compatibility(action, &before).unwrap();
            let mut enriched = owned.clone();
            for e in &mut enriched {
                for x in &extra {
                    e.properties.insert(o.properties[x % o.properties.len()].name.clone());
                }
            }
            let after: Binding = roles.iter().cloned().zip(enriched.iter()).collect();
            let r2 = check_compatibility(action, &after).unwrap();
            if r1.is_compatible() {
                prop_assert!(r2.is_compatible());
            }
            prop_assert!(r2.missing.len() <= r1.missing.len());
        }
    }
}
