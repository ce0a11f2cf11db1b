use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{RuntimeError, SkillModelBundle};
use crate::features::{extract_sentence_features, sequence_features, tokenize};
use crate::frame::{FrameSource, SemanticFrame};
use crate::grammar::{build_grammar_with_catalog, WeightedGrammar};
use crate::interaction_model::{
    IntentDecl, IntentSchema, InteractionModel, LabeledUtterance, SlotCatalog, SlotDecl, TemplateToken,
};
use crate::models::{decode_frame, CrfModel, MaxEntModel, OUTSIDE};

pub const DEFAULT_REJECTION_THRESHOLD: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CascadeOrder {
    /// Classify, then tag with labels restricted to the intent's slots.
    #[default]
    IntentFirst,
    /// Tag unrestricted, classify, then drop slots the intent lacks.
    SlotsFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NluConfig {
    pub rejection_threshold: f64,
    pub order: CascadeOrder,
}

impl Default for NluConfig {
    fn default() -> Self {
        NluConfig { rejection_threshold: DEFAULT_REJECTION_THRESHOLD, order: CascadeOrder::IntentFirst }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NluPath {
    Deterministic,
    Statistical,
    OutOfDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub path: NluPath,
    pub tokens: Vec<String>,
    /// Grammar path cost (−log probability) when the recognizer accepted.
    pub grammar_cost: Option<f64>,
    pub intent_posterior: Option<f64>,
    /// Top intents by posterior, best first.
    pub alternatives: Vec<(String, f64)>,
    pub tags: Vec<String>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NluResult {
    pub frame: Option<SemanticFrame>,
    pub diagnostics: Diagnostics,
}

impl NluResult {
    pub fn is_out_of_domain(&self) -> bool {
        self.frame.is_none()
    }

    pub fn path(&self) -> NluPath {
        self.diagnostics.path
    }

    /// `{"intent", "slots", "confidence", "source", "diagnostics"}`; slots map
    /// names to values.
    pub fn to_json(&self) -> Value {
        let source = match self.diagnostics.path {
            NluPath::Deterministic => "deterministic",
            NluPath::Statistical => "statistical",
            NluPath::OutOfDomain => "out_of_domain",
        };
        let (intent, slots, confidence) = match &self.frame {
            Some(f) => {
                let slots: BTreeMap<&str, &str> = f.slots.iter().map(|(k, v)| (k.as_str(), v.value.as_str())).collect();
                (json!(f.intent), json!(slots), json!(f.confidence))
            }
            None => (Value::Null, json!({}), json!(self.diagnostics.intent_posterior.unwrap_or(0.0))),
        };
        json!({
            "intent": intent,
            "slots": slots,
            "confidence": confidence,
            "source": source,
            "diagnostics": self.diagnostics,
        })
    }
}

const ANSWER_INTENT: &str = "Answer";
const ANSWER_SLOT: &str = "Value";

fn one_slot_grammar(slot_type: &str, values: &[String]) -> Result<WeightedGrammar, RuntimeError> {
    let model = InteractionModel {
        schema: IntentSchema { intents: vec![IntentDecl::new(ANSWER_INTENT, vec![SlotDecl::new(ANSWER_SLOT, slot_type)])] },
        slot_types: Vec::new(),
        samples: vec![LabeledUtterance::new(ANSWER_INTENT, vec![TemplateToken::Slot(ANSWER_SLOT.into())])],
        invocation_name: String::new(),
    };
    let catalog = SlotCatalog::from_map(BTreeMap::from([(slot_type.to_string(), values.to_vec())]));
    Ok(build_grammar_with_catalog(&model, &catalog)?)
}

/// A loaded skill: the bundle plus dequantized models ready for inference.
/// Immutable and safe to share between threads.
#[derive(Debug)]
pub struct SkillRuntime {
    bundle: Arc<SkillModelBundle>,
    intent: MaxEntModel,
    tagger: CrfModel,
    masks: HashMap<String, Vec<bool>>,
    answer_grammars: HashMap<String, WeightedGrammar>,
    config: NluConfig,
}

impl SkillRuntime {
    pub fn new(bundle: SkillModelBundle, config: NluConfig) -> Result<Self, RuntimeError> {
        if bundle.intent_model.labels.is_empty() {
            return Err(RuntimeError::MissingComponent("intent classifier labels".into()));
        }
        if bundle.slot_model.labels.first().map(String::as_str) != Some(OUTSIDE) {
            return Err(RuntimeError::MissingComponent("slot tagger labels".into()));
        }
        let intent = bundle.intent_model.dequantize();
        let tagger = bundle.slot_model.dequantize();
        let mut masks = HashMap::new();
        let mut answer_grammars = HashMap::new();
        for decl in &bundle.schema.intents {
            let mask = tagger
                .labels
                .iter()
                .map(|l| {
                    l == OUTSIDE
                        || l.strip_prefix("B-").or_else(|| l.strip_prefix("I-")).is_some_and(|s| decl.slot(s).is_some())
                })
                .collect();
            masks.insert(decl.name.clone(), mask);
            for slot in &decl.slots {
                if answer_grammars.contains_key(&slot.slot_type) {
                    continue;
                }
                let values = bundle
                    .slot_values
                    .get(&slot.slot_type)
                    .ok_or_else(|| RuntimeError::MissingComponent(format!("values for slot type {}", slot.slot_type)))?;
                answer_grammars.insert(slot.slot_type.clone(), one_slot_grammar(&slot.slot_type, values)?);
            }
        }
        Ok(SkillRuntime { bundle: Arc::new(bundle), intent, tagger, masks, answer_grammars, config })
    }

    pub fn bundle(&self) -> &SkillModelBundle {
        &self.bundle
    }

    pub fn config(&self) -> &NluConfig {
        &self.config
    }

    pub fn skill_id(&self) -> &str {
        &self.bundle.skill_id
    }

    pub fn version(&self) -> u64 {
        self.bundle.version
    }

    pub fn intent_decl(&self, intent: &str) -> Option<&IntentDecl> {
        self.bundle.schema.intent(intent)
    }

    /// Deterministic recognizer first; statistical cascade only when the
    /// grammar rejects the utterance.
    pub fn understand(&self, text: &str) -> NluResult {
        let tokens = tokenize(text);
        let mut diag = Diagnostics {
            path: NluPath::OutOfDomain,
            tokens: tokens.clone(),
            grammar_cost: None,
            intent_posterior: None,
            alternatives: Vec::new(),
            tags: Vec::new(),
            reason: None,
        };
        if tokens.is_empty() {
            diag.reason = Some("empty utterance".into());
            return NluResult { frame: None, diagnostics: diag };
        }
        if let Some((frame, cost)) = self.bundle.grammar.best_path(&tokens) {
            diag.path = NluPath::Deterministic;
            diag.grammar_cost = Some(cost);
            return NluResult { frame: Some(frame), diagnostics: diag };
        }

        let gaz = &self.bundle.gazetteers;
        let probs = self.intent.predict_names(&extract_sentence_features(&tokens, gaz));
        let mut ranked: Vec<(String, f64)> = self.intent.labels.iter().cloned().zip(probs.iter().copied()).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let (best, posterior) = ranked[0].clone();
        diag.intent_posterior = Some(posterior);
        diag.alternatives = ranked.into_iter().take(3).collect();
        if posterior < self.config.rejection_threshold {
            diag.reason = Some(format!("intent posterior {posterior:.3} below {:.2}", self.config.rejection_threshold));
            return NluResult { frame: None, diagnostics: diag };
        }

        let xs = self.tagger.encode_sequence(&sequence_features(&tokens, gaz));
        let ys = match (self.config.order, self.masks.get(&best)) {
            (CascadeOrder::IntentFirst, Some(mask)) => self.tagger.viterbi_masked(&xs, mask).0,
            _ => self.tagger.viterbi(&xs).0,
        };
        let tags: Vec<String> = ys.iter().map(|&y| self.tagger.labels[y].clone()).collect();
        let mut frame = decode_frame(&tokens, &tags, &best);
        if let Some(decl) = self.intent_decl(&best) {
            frame.slots.retain(|name, _| decl.slot(name).is_some());
        }
        frame.confidence = posterior;
        frame.source = FrameSource::Statistical;
        diag.path = NluPath::Statistical;
        diag.tags = tags;
        NluResult { frame: Some(frame), diagnostics: diag }
    }

    /// Recognizes a bare slot value against the one-slot grammar for
    /// `slot_type`.
    pub fn recognize_slot_value(&self, slot_type: &str, text: &str) -> Option<String> {
        let g = self.answer_grammars.get(slot_type)?;
        g.recognize(&tokenize(text))?.slot_value(ANSWER_SLOT).map(str::to_string)
    }

    /// Slot values starting with `prefix`, for console completion.
    pub fn complete(&self, prefix: &str) -> Vec<String> {
        let p = crate::text::normalize_phrase(prefix);
        let mut out: Vec<String> =
            self.bundle.slot_values.values().flatten().filter(|v| v.starts_with(&p)).cloned().collect();
        out.sort();
        out.dedup();
        out
    }
}
