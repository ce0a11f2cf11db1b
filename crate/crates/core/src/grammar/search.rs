use std::cmp::Ordering;
use std::collections::HashMap;

use super::{GrammarError, OutputSymbol, WeightedGrammar, EPSILON};
use crate::frame::{FrameSource, SemanticFrame};

/// Weights closer than this are treated as a tie.
const WEIGHT_TIE: f64 = 1e-9;

/// One accepting path: surface tokens, decoded frame and path probability.
#[derive(Debug, Clone, PartialEq)]
pub struct GrammarPath {
    pub tokens: Vec<String>,
    pub frame: SemanticFrame,
    pub probability: f64,
}

/// Best completion from a `(state, position)` pair: total weight and the
/// non-epsilon outputs with the token position at which each was emitted.
#[derive(Clone)]
struct Suffix {
    weight: f64,
    outputs: Vec<(u32, u32)>,
}

impl WeightedGrammar {
    /// Returns the frame of the min-weight accepting path for `tokens`, or
    /// `None` when the utterance is outside the grammar. Ties within 1e-9
    /// go to the lexicographically smallest output sequence, i.e. intent
    /// name first.
    pub fn recognize(&self, tokens: &[String]) -> Option<SemanticFrame> {
        self.best_path(tokens).map(|(frame, _)| frame)
    }

    /// Like [`Self::recognize`] but also returns the path weight.
    pub fn best_path(&self, tokens: &[String]) -> Option<(SemanticFrame, f64)> {
        let ids: Vec<u32> = tokens.iter().map(|t| self.input_symbols.get(t)).collect::<Option<_>>()?;
        let mut memo = HashMap::new();
        let best = self.best_suffix(self.start, 0, &ids, &mut memo)?;
        Some((self.decode(&best.outputs, tokens), best.weight))
    }

    fn best_suffix(
        &self,
        state: u32,
        pos: u32,
        ids: &[u32],
        memo: &mut HashMap<(u32, u32), Option<Suffix>>,
    ) -> Option<Suffix> {
        if let Some(hit) = memo.get(&(state, pos)) {
            return hit.clone();
        }
        let mut best: Option<Suffix> = None;
        if pos as usize == ids.len() {
            if let Some(w) = self.final_weight(state) {
                best = Some(Suffix { weight: w, outputs: Vec::new() });
            }
        }
        let arcs = self.arcs(state);
        let eps_end = arcs.partition_point(|a| a.ilabel == EPSILON);
        let mut candidates: Vec<(usize, u32)> = (0..eps_end).map(|i| (i, pos)).collect();
        if let Some(&next_id) = ids.get(pos as usize) {
            let lo = eps_end + arcs[eps_end..].partition_point(|a| a.ilabel < next_id);
            let hi = eps_end + arcs[eps_end..].partition_point(|a| a.ilabel <= next_id);
            candidates.extend((lo..hi).map(|i| (i, pos + 1)));
        }
        for (i, next_pos) in candidates {
            let arc = &arcs[i];
            let Some(rest) = self.best_suffix(arc.nextstate, next_pos, ids, memo) else { continue };
            let mut outputs = Vec::with_capacity(rest.outputs.len() + 1);
            if arc.olabel != EPSILON {
                outputs.push((arc.olabel, pos));
            }
            outputs.extend_from_slice(&rest.outputs);
            let cand = Suffix { weight: arc.weight + rest.weight, outputs };
            best = match best {
                Some(b) if self.compare(&b, &cand) != Ordering::Greater => Some(b),
                _ => Some(cand),
            };
        }
        memo.insert((state, pos), best.clone());
        best
    }

    fn compare(&self, a: &Suffix, b: &Suffix) -> Ordering {
        if (a.weight - b.weight).abs() > WEIGHT_TIE {
            return a.weight.partial_cmp(&b.weight).unwrap_or(Ordering::Equal);
        }
        let names = |s: &Suffix| s.outputs.iter().map(|(o, _)| self.output_symbols.symbol(*o).to_string()).collect::<Vec<_>>();
        names(a).cmp(&names(b)).then_with(|| a.outputs.iter().map(|x| x.1).cmp(b.outputs.iter().map(|x| x.1)))
    }

    fn decode(&self, outputs: &[(u32, u32)], tokens: &[String]) -> SemanticFrame {
        let mut frame = SemanticFrame::new(String::new(), FrameSource::Deterministic);
        let mut open: HashMap<&str, u32> = HashMap::new();
        for (olabel, pos) in outputs {
            match self.output_kind(*olabel) {
                OutputSymbol::Intent(name) if frame.intent.is_empty() => frame.intent = name.clone(),
                OutputSymbol::SlotOpen(name) => {
                    open.insert(name, *pos);
                }
                OutputSymbol::SlotClose(name) => {
                    if let Some(start) = open.remove(name.as_str()) {
                        let (s, e) = (start as usize, *pos as usize);
                        frame = frame.with_slot(name.clone(), tokens[s..e].join(" "), (s, e));
                    }
                }
                _ => {}
            }
        }
        frame
    }

    /// All accepting paths in depth-first arc order. Fails once more than
    /// `limit` paths exist.
    pub fn enumerate_paths(&self, limit: usize) -> Result<Vec<GrammarPath>, GrammarError> {
        let mut out = Vec::new();
        let mut tokens = Vec::new();
        let mut outputs = Vec::new();
        self.dfs(self.start, 0.0, &mut tokens, &mut outputs, limit, &mut out)?;
        Ok(out)
    }

    /// Number of accepting paths, computed without enumerating them.
    pub fn count_paths(&self) -> f64 {
        let n = self.num_states();
        let mut memo: Vec<Option<f64>> = vec![None; n];
        fn go(g: &WeightedGrammar, s: u32, memo: &mut Vec<Option<f64>>) -> f64 {
            if let Some(c) = memo[s as usize] {
                return c;
            }
            let mut c = if g.is_final(s) { 1.0 } else { 0.0 };
            for a in g.arcs(s) {
                c += go(g, a.nextstate, memo);
            }
            memo[s as usize] = Some(c);
            c
        }
        go(self, self.start, &mut memo)
    }

    fn dfs(
        &self,
        state: u32,
        weight: f64,
        tokens: &mut Vec<u32>,
        outputs: &mut Vec<(u32, u32)>,
        limit: usize,
        out: &mut Vec<GrammarPath>,
    ) -> Result<(), GrammarError> {
        if let Some(fw) = self.final_weight(state) {
            if out.len() == limit {
                return Err(GrammarError::LimitExceeded { limit });
            }
            let words: Vec<String> = tokens.iter().map(|&t| self.input_symbols.symbol(t).to_string()).collect();
            let frame = self.decode(outputs, &words);
            out.push(GrammarPath { tokens: words, frame, probability: (-(weight + fw)).exp() });
        }
        for arc in self.arcs(state) {
            let pushed_out = arc.olabel != EPSILON;
            if pushed_out {
                outputs.push((arc.olabel, tokens.len() as u32));
            }
            if arc.ilabel != EPSILON {
                tokens.push(arc.ilabel);
            }
            self.dfs(arc.nextstate, weight + arc.weight, tokens, outputs, limit, out)?;
            if arc.ilabel != EPSILON {
                tokens.pop();
            }
            if pushed_out {
                outputs.pop();
            }
        }
        Ok(())
    }
}
