use std::collections::HashSet;

use serde_json::{json, Map, Value};

use super::{IntentDecl, IntentSchema, ModelError, SlotDecl};

/// Parses the developer intent schema:
///
/// ```json
/// {"intents": [{"intent": "GetHoroscope",
///               "slots": [{"name": "Sign", "type": "ZODIAC_SIGNS"}]}]}
/// ```
///
/// Optional dialogue keys: `"confirmationRequired"` / `"confirmationPrompt"`
/// on intents and `"required"` / `"prompt"` on slots.
pub fn parse_intent_schema(json_text: &str) -> Result<IntentSchema, ModelError> {
    let root: Value = serde_json::from_str(json_text)?;
    let intents = root.get("intents").and_then(Value::as_array).ok_or(ModelError::MissingIntents)?;

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(intents.len());
    for (index, raw) in intents.iter().enumerate() {
        let name = raw
            .get("intent")
            .and_then(Value::as_str)
            .ok_or(ModelError::MissingIntentName { index })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(ModelError::DuplicateIntent(name));
        }

        let mut slots = Vec::new();
        let mut slot_names = HashSet::new();
        if let Some(raw_slots) = raw.get("slots").and_then(Value::as_array) {
            for (si, slot) in raw_slots.iter().enumerate() {
                let field = |key: &'static str| {
                    slot.get(key).and_then(Value::as_str).map(str::to_string).ok_or_else(|| {
                        ModelError::SlotMissingField { intent: name.clone(), index: si, field: key }
                    })
                };
                let slot_name = field("name")?;
                let slot_type = field("type")?;
                if !slot_names.insert(slot_name.clone()) {
                    return Err(ModelError::DuplicateSlot { intent: name, slot: slot_name });
                }
                slots.push(SlotDecl {
                    name: slot_name,
                    slot_type,
                    required: slot.get("required").and_then(Value::as_bool).unwrap_or(false),
                    prompt: slot.get("prompt").and_then(Value::as_str).map(str::to_string),
                });
            }
        }

        out.push(IntentDecl {
            name,
            slots,
            confirmation_required: raw.get("confirmationRequired").and_then(Value::as_bool).unwrap_or(false),
            confirmation_prompt: raw.get("confirmationPrompt").and_then(Value::as_str).map(str::to_string),
        });
    }
    Ok(IntentSchema { intents: out })
}

pub(super) fn schema_to_json(schema: &IntentSchema) -> String {
    let intents: Vec<Value> = schema
        .intents
        .iter()
        .map(|intent| {
            let slots: Vec<Value> = intent
                .slots
                .iter()
                .map(|s| {
                    let mut m = Map::new();
                    m.insert("name".into(), json!(s.name));
                    m.insert("type".into(), json!(s.slot_type));
                    if s.required {
                        m.insert("required".into(), json!(true));
                    }
                    if let Some(p) = &s.prompt {
                        m.insert("prompt".into(), json!(p));
                    }
                    Value::Object(m)
                })
                .collect();
            let mut m = Map::new();
            m.insert("intent".into(), json!(intent.name));
            m.insert("slots".into(), Value::Array(slots));
            if intent.confirmation_required {
                m.insert("confirmationRequired".into(), json!(true));
            }
            if let Some(p) = &intent.confirmation_prompt {
                m.insert("confirmationPrompt".into(), json!(p));
            }
            Value::Object(m)
        })
        .collect();
    format!("{:#}\n", json!({ "intents": intents }))
}
