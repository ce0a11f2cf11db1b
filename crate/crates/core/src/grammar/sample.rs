use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GrammarError, OutputSymbol, WeightedGrammar, EPSILON};
use crate::frame::{FrameSource, SemanticFrame};
use crate::interaction_model::{LabeledUtterance, TemplateToken};

/// A generated utterance with the frame its path encodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GrammarSample {
    pub tokens: Vec<String>,
    pub frame: SemanticFrame,
}

impl GrammarSample {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// `Intent token token ...\t{frame json}`
    pub fn to_line(&self) -> String {
        format!(
            "{} {}\t{}",
            self.frame.intent,
            self.text(),
            serde_json::to_string(&self.frame).expect("frame serializes")
        )
    }

    /// Per-token BIO tags, `O` outside slots.
    pub fn bio_tags(&self) -> Vec<String> {
        let mut tags = vec!["O".to_string(); self.tokens.len()];
        for (name, fill) in &self.frame.slots {
            for (i, tag) in tags.iter_mut().enumerate().take(fill.span.1).skip(fill.span.0) {
                *tag = if i == fill.span.0 { format!("B-{name}") } else { format!("I-{name}") };
            }
        }
        tags
    }

    /// The sample as a template with slot values folded back into references.
    pub fn labeled(&self) -> LabeledUtterance {
        let mut template = Vec::new();
        let mut i = 0;
        let mut spans: Vec<_> = self.frame.slots.iter().map(|(n, f)| (f.span, n.clone())).collect();
        spans.sort();
        let mut it = spans.into_iter().peekable();
        while i < self.tokens.len() {
            if let Some(((s, e), name)) = it.next_if(|((s, _), _)| *s == i) {
                template.push(TemplateToken::Slot(name));
                i = e.max(s + 1);
            } else {
                template.push(TemplateToken::Word(self.tokens[i].clone()));
                i += 1;
            }
        }
        LabeledUtterance { intent: self.frame.intent.clone(), template, line: None }
    }
}

impl WeightedGrammar {
    /// Draws `n` paths by ancestral sampling under the active weighting.
    pub fn sample_utterances(&self, n: usize, seed: u64) -> Result<Vec<GrammarSample>, GrammarError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with_rng(n, &mut rng)
    }

    pub fn sample_with_rng<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<GrammarSample>, GrammarError> {
        if n == 0 {
            return Err(GrammarError::ZeroSamples);
        }
        Ok((0..n).map(|_| self.sample_one(rng)).collect())
    }

    fn sample_one<R: Rng>(&self, rng: &mut R) -> GrammarSample {
        let mut state = self.start;
        let mut tokens = Vec::new();
        let mut frame = SemanticFrame::new(String::new(), FrameSource::Deterministic);
        let mut open: Vec<(String, usize)> = Vec::new();
        loop {
            let arcs = self.arcs(state);
            let fin = self.final_weight(state).map_or(0.0, |w| (-w).exp());
            let total: f64 = fin + arcs.iter().map(|a| (-a.weight).exp()).sum::<f64>();
            let mut r = rng.gen::<f64>() * total;
            if r < fin || arcs.is_empty() {
                break;
            }
            r -= fin;
            let mut chosen = arcs.last().expect("nonempty");
            for a in arcs {
                let p = (-a.weight).exp();
                if r < p {
                    chosen = a;
                    break;
                }
                r -= p;
            }
            match self.output_kind(chosen.olabel) {
                OutputSymbol::Intent(name) => frame.intent = name.clone(),
                OutputSymbol::SlotOpen(name) => open.push((name.clone(), tokens.len())),
                OutputSymbol::SlotClose(name) => {
                    if let Some(k) = open.iter().rposition(|(n, _)| n == name) {
                        let (_, start) = open.remove(k);
                        let value = tokens[start..].join(" ");
                        frame = frame.with_slot(name.clone(), value, (start, tokens.len()));
                    }
                }
                OutputSymbol::Epsilon => {}
            }
            if chosen.ilabel != EPSILON {
                tokens.push(self.input_symbols.symbol(chosen.ilabel).to_string());
            }
            state = chosen.nextstate;
        }
        GrammarSample { tokens, frame }
    }
}
