use crate::frame::{FrameSource, SemanticFrame};

pub const OUTSIDE: &str = "O";

/// `O`, then `B-x`, `I-x` for each slot in order.
pub fn bio_labels(slots: &[String]) -> Vec<String> {
    let mut labels = vec![OUTSIDE.to_string()];
    for s in slots {
        labels.push(format!("B-{s}"));
        labels.push(format!("I-{s}"));
    }
    labels
}

/// Turns BIO labels into slot spans. A maximal run `B-x I-x*` is one span;
/// an `I-x` that does not continue an `x` span starts a new one. When a slot
/// occurs twice the first span wins.
pub fn decode_frame(tokens: &[String], labels: &[String], intent: &str) -> SemanticFrame {
    let mut frame = SemanticFrame::new(intent, FrameSource::Statistical);
    let mut spans: Vec<(String, usize, usize)> = Vec::new();
    let mut open: Option<(String, usize)> = None;
    let n = tokens.len().min(labels.len());
    for (i, label) in labels.iter().enumerate().take(n) {
        let (begin, slot) = match (label.strip_prefix("B-"), label.strip_prefix("I-")) {
            (Some(s), _) => (true, Some(s)),
            (_, Some(s)) => (open.as_ref().is_none_or(|(o, _)| o != s), Some(s)),
            _ => (true, None),
        };
        if begin {
            if let Some((s, start)) = open.take() {
                spans.push((s, start, i));
            }
            open = slot.map(|s| (s.to_string(), i));
        }
    }
    if let Some((s, start)) = open {
        spans.push((s, start, n));
    }
    for (slot, s, e) in spans {
        if !frame.slots.contains_key(&slot) {
            frame = frame.with_slot(slot, tokens[s..e].join(" "), (s, e));
        }
    }
    frame
}
