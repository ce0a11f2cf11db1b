use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    Deterministic,
    Statistical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotFill {
    pub value: String,
    /// Token span `[start, end)` in the utterance.
    pub span: (usize, usize),
}

/// Intent plus slot fills: the structured request handed to a skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticFrame {
    pub intent: String,
    pub slots: BTreeMap<String, SlotFill>,
    pub confidence: f64,
    pub source: FrameSource,
}

impl SemanticFrame {
    pub fn new(intent: impl Into<String>, source: FrameSource) -> Self {
        let confidence = match source {
            FrameSource::Deterministic => 1.0,
            FrameSource::Statistical => 0.0,
        };
        SemanticFrame { intent: intent.into(), slots: BTreeMap::new(), confidence, source }
    }

    pub fn with_slot(mut self, name: impl Into<String>, value: impl Into<String>, span: (usize, usize)) -> Self {
        self.slots.insert(name.into(), SlotFill { value: value.into(), span });
        self
    }

    pub fn slot_value(&self, name: &str) -> Option<&str> {
        self.slots.get(name).map(|s| s.value.as_str())
    }

    /// Same intent and identical slot fills (confidence and source ignored).
    pub fn same_parse(&self, other: &SemanticFrame) -> bool {
        self.intent == other.intent && self.slots == other.slots
    }

    /// Spans are non-overlapping and inside `[0, len)`.
    pub fn spans_valid(&self, len: usize) -> bool {
        let mut spans: Vec<_> = self.slots.values().map(|s| s.span).collect();
        spans.sort_unstable();
        spans.iter().all(|&(a, b)| a < b && b <= len) && spans.windows(2).all(|w| w[0].1 <= w[1].0)
    }
}
