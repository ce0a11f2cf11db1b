use std::collections::BTreeMap;

use serde_json::Value;

use super::{dedup_normalized, CustomSlotType, InteractionModel, ModelError};

const BUNDLED_BUILTINS: &str = include_str!("../../data/builtin_slot_types.json");

/// `{"name": "ZODIAC_SIGNS", "values": ["aries", ...]}`. Values may also be
/// given as `{"value": "aries"}` objects.
pub fn parse_slot_type_json(text: &str) -> Result<CustomSlotType, ModelError> {
    let root: Value = serde_json::from_str(text)?;
    let name = root.get("name").and_then(Value::as_str).unwrap_or("").to_string();
    let values = root
        .get("values")
        .and_then(Value::as_array)
        .ok_or_else(|| ModelError::SlotTypeShape(name.clone()))?;
    let values = values
        .iter()
        .map(|v| match v {
            Value::String(s) => Some(s.clone()),
            Value::Object(o) => o.get("value").and_then(Value::as_str).map(str::to_string),
            _ => None,
        })
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| ModelError::SlotTypeShape(name.clone()))?;
    Ok(CustomSlotType { name, values })
}

/// One value per line; blank lines and `#` comments skipped.
pub fn parse_slot_type_lines(name: &str, text: &str) -> CustomSlotType {
    let values = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    CustomSlotType { name: name.to_string(), values }
}

/// Builtin slot types shipped with the toolkit as value lists.
#[derive(Debug, Clone)]
pub struct BuiltinSlotTypes {
    types: BTreeMap<String, Vec<String>>,
}

impl BuiltinSlotTypes {
    pub fn bundled() -> Self {
        let raw: Vec<CustomSlotType> = serde_json::from_str(BUNDLED_BUILTINS).expect("bundled builtin slot types parse");
        Self::from_types(raw)
    }

    pub fn empty() -> Self {
        BuiltinSlotTypes { types: BTreeMap::new() }
    }

    pub fn from_types(types: impl IntoIterator<Item = CustomSlotType>) -> Self {
        let types = types.into_iter().map(|t| (t.name.clone(), t.normalized_values())).collect();
        BuiltinSlotTypes { types }
    }

    pub fn get(&self, name: &str) -> Option<&[String]> {
        self.types.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.types.keys().map(String::as_str)
    }
}

impl Default for BuiltinSlotTypes {
    fn default() -> Self {
        Self::bundled()
    }
}

/// Resolved slot-type name → normalized value list. Custom types shadow
/// builtins of the same name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotCatalog {
    types: BTreeMap<String, Vec<String>>,
}

impl SlotCatalog {
    pub fn new(model: &InteractionModel, builtins: &BuiltinSlotTypes) -> Self {
        let mut types = BTreeMap::new();
        for intent in &model.schema.intents {
            for slot in &intent.slots {
                if let Some(values) = builtins.get(&slot.slot_type) {
                    types.insert(slot.slot_type.clone(), values.to_vec());
                }
            }
        }
        for custom in &model.slot_types {
            types.insert(custom.name.clone(), custom.normalized_values());
        }
        SlotCatalog { types }
    }

    pub fn from_map(types: BTreeMap<String, Vec<String>>) -> Self {
        let types = types.into_iter().map(|(k, v)| (k, dedup_normalized(&v))).collect();
        SlotCatalog { types }
    }

    pub fn values(&self, slot_type: &str) -> Option<&[String]> {
        self.types.get(slot_type).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.types.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn into_map(self) -> BTreeMap<String, Vec<String>> {
        self.types
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_and_lines() {
        let t = parse_slot_type_json(r#"{"name": "ZODIAC_SIGNS", "values": ["Aries", {"value": "Taurus"}]}"#).unwrap();
        assert_eq!(t.name, "ZODIAC_SIGNS");
        assert_eq!(t.normalized_values(), vec!["aries", "taurus"]);
        assert!(parse_slot_type_json(r#"{"name": "X"}"#).is_err());

        let t = parse_slot_type_lines("CITY", "New York\n\n# comment\nseattle\nNEW  york\n");
        assert_eq!(t.values.len(), 3);
        assert_eq!(t.normalized_values(), vec!["new york", "seattle"]);
    }

    #[test]
    fn bundled_builtins_load() {
        let b = BuiltinSlotTypes::bundled();
        assert_eq!(b.get("AMAZON.DATE").unwrap().len(), 13);
        assert!(b.get("AMAZON.NOPE").is_none());
    }
}
