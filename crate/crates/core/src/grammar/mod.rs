//! Weighted finite-state transducer compiled from an interaction model.
//!
//! Input labels are utterance tokens; output labels are intent markers
//! (`@Intent`) and slot brackets (`<Slot>` / `</Slot>`). Weights are negative
//! natural-log probabilities and decoding is min-weight (tropical).
//!
//! Every arc carries two weightings computed at build time: the empirical one
//! (sample frequencies) and the maximum-entropy one (uniform over intents,
//! then over each intent's distinct templates, then over slot values). The
//! active weighting is switched with [`apply_max_entropy_priors`] /
//! [`WeightedGrammar::with_empirical_priors`].

mod build;
mod io;
mod sample;
mod search;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use build::{build_grammar, build_grammar_with_catalog};
pub use io::FORMAT_VERSION;
pub use sample::GrammarSample;
pub use search::GrammarPath;

pub const EPSILON: u32 = 0;
pub const EPSILON_SYMBOL: &str = "<eps>";

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("slot type {0:?} has no values")]
    EmptySlotType(String),
    #[error("slot type {0:?} cannot be resolved")]
    UnknownSlotType(String),
    #[error("sample #{index} of intent {intent:?} expands to zero tokens")]
    EmptyTemplate { intent: String, index: usize },
    #[error("sample references slot {slot:?} which intent {intent:?} does not declare")]
    UndeclaredSlot { intent: String, slot: String },
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("grammar has more than {limit} accepting paths")]
    LimitExceeded { limit: usize },
    #[error("grammar format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bidirectional string ↔ id table; id 0 is epsilon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolTable {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Default for SymbolTable {
    fn default() -> Self {
        Self::new()
    }
}

impl SymbolTable {
    pub fn new() -> Self {
        let mut t = SymbolTable { symbols: Vec::new(), index: HashMap::new() };
        t.intern(EPSILON_SYMBOL);
        t
    }

    pub fn intern(&mut self, symbol: &str) -> u32 {
        if let Some(&id) = self.index.get(symbol) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), id);
        id
    }

    pub fn get(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> &str {
        &self.symbols[id as usize]
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() <= 1
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.symbols.iter().enumerate().map(|(i, s)| (i as u32, s.as_str()))
    }

    pub(crate) fn from_symbols(symbols: Vec<String>) -> Result<Self, GrammarError> {
        if symbols.first().map(String::as_str) != Some(EPSILON_SYMBOL) {
            return Err(GrammarError::Format("symbol table must start with <eps>".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(GrammarError::Format(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(SymbolTable { symbols, index })
    }
}

/// Decoded meaning of an output label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum OutputSymbol {
    Epsilon,
    Intent(String),
    SlotOpen(String),
    SlotClose(String),
}

impl OutputSymbol {
    pub fn parse(symbol: &str) -> Option<Self> {
        if symbol == EPSILON_SYMBOL {
            Some(OutputSymbol::Epsilon)
        } else if let Some(name) = symbol.strip_prefix('@') {
            Some(OutputSymbol::Intent(name.to_string()))
        } else if let Some(name) = symbol.strip_prefix("</").and_then(|s| s.strip_suffix('>')) {
            Some(OutputSymbol::SlotClose(name.to_string()))
        } else {
            symbol.strip_prefix('<').and_then(|s| s.strip_suffix('>')).map(|n| OutputSymbol::SlotOpen(n.to_string()))
        }
    }

    pub fn render(&self) -> String {
        match self {
            OutputSymbol::Epsilon => EPSILON_SYMBOL.to_string(),
            OutputSymbol::Intent(n) => format!("@{n}"),
            OutputSymbol::SlotOpen(n) => format!("<{n}>"),
            OutputSymbol::SlotClose(n) => format!("</{n}>"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub ilabel: u32,
    pub olabel: u32,
    pub weight: f64,
    pub nextstate: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    Empirical,
    MaxEntropy,
}

/// Arc and final weights for one weighting scheme, indexed like the arcs.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct WeightSet {
    pub arcs: Vec<f64>,
    pub finals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WeightedGrammar {
    pub(crate) input_symbols: SymbolTable,
    pub(crate) output_symbols: SymbolTable,
    pub(crate) output_kinds: Vec<OutputSymbol>,
    pub(crate) start: u32,
    /// CSR layout: arcs of state `s` are `arcs[offsets[s]..offsets[s + 1]]`,
    /// epsilon-input arcs first, then by input label.
    pub(crate) offsets: Vec<u32>,
    pub(crate) arcs: Vec<Arc>,
    /// `+inf` for non-final states.
    pub(crate) finals: Vec<f64>,
    pub(crate) empirical: WeightSet,
    pub(crate) uniform: WeightSet,
    pub(crate) prior: PriorMode,
    pub(crate) intents: Vec<String>,
    pub(crate) warnings: Vec<String>,
}

impl PartialEq for WeightedGrammar {
    fn eq(&self, other: &Self) -> bool {
        self.input_symbols.symbols == other.input_symbols.symbols
            && self.output_symbols.symbols == other.output_symbols.symbols
            && self.start == other.start
            && self.offsets == other.offsets
            && self.arcs == other.arcs
            && self.finals == other.finals
            && self.empirical == other.empirical
            && self.uniform == other.uniform
            && self.prior == other.prior
            && self.intents == other.intents
    }
}

/// Imposes uniform priors: over intents, then over each intent's distinct
/// templates, then over each slot's values.
pub fn apply_max_entropy_priors(g: WeightedGrammar) -> WeightedGrammar {
    g.with_prior(PriorMode::MaxEntropy)
}

impl WeightedGrammar {
    pub fn with_empirical_priors(self) -> Self {
        self.with_prior(PriorMode::Empirical)
    }

    pub fn with_prior(mut self, mode: PriorMode) -> Self {
        let set = match mode {
            PriorMode::Empirical => &self.empirical,
            PriorMode::MaxEntropy => &self.uniform,
        };
        for (arc, &w) in self.arcs.iter_mut().zip(&set.arcs) {
            arc.weight = w;
        }
        self.finals.clone_from(&set.finals);
        self.prior = mode;
        self
    }

    pub fn prior(&self) -> PriorMode {
        self.prior
    }

    pub fn start(&self) -> u32 {
        self.start
    }

    pub fn num_states(&self) -> usize {
        self.finals.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.len()
    }

    pub fn arcs(&self, state: u32) -> &[Arc] {
        let s = state as usize;
        &self.arcs[self.offsets[s] as usize..self.offsets[s + 1] as usize]
    }

    pub fn final_weight(&self, state: u32) -> Option<f64> {
        let w = self.finals[state as usize];
        w.is_finite().then_some(w)
    }

    pub fn is_final(&self, state: u32) -> bool {
        self.finals[state as usize].is_finite()
    }

    pub fn input_symbols(&self) -> &SymbolTable {
        &self.input_symbols
    }

    pub fn output_symbols(&self) -> &SymbolTable {
        &self.output_symbols
    }

    pub fn output_kind(&self, olabel: u32) -> &OutputSymbol {
        &self.output_kinds[olabel as usize]
    }

    /// Intents with at least one path, in schema order.
    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    /// Build-time diagnostics such as templates shared by several intents.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Largest deviation from 1 of outgoing probability mass (arcs plus final
    /// probability) over all states.
    pub fn max_stochastic_deviation(&self) -> f64 {
        (0..self.num_states() as u32)
            .map(|s| {
                let arcs: f64 = self.arcs(s).iter().map(|a| (-a.weight).exp()).sum();
                let fin = self.final_weight(s).map(|w| (-w).exp()).unwrap_or(0.0);
                (arcs + fin - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Every state is reachable from the start and reaches a final state.
    pub fn is_trim(&self) -> bool {
        let n = self.num_states();
        let mut reach = vec![false; n];
        let mut stack = vec![self.start];
        reach[self.start as usize] = true;
        while let Some(s) = stack.pop() {
            for a in self.arcs(s) {
                if !reach[a.nextstate as usize] {
                    reach[a.nextstate as usize] = true;
                    stack.push(a.nextstate);
                }
            }
        }
        // co-reachability by fixpoint over the reversed graph
        let mut rev: Vec<Vec<u32>> = vec![Vec::new(); n];
        for s in 0..n as u32 {
            for a in self.arcs(s) {
                rev[a.nextstate as usize].push(s);
            }
        }
        let mut coreach = vec![false; n];
        let mut stack: Vec<u32> = (0..n as u32).filter(|&s| self.is_final(s)).collect();
        for &s in &stack {
            coreach[s as usize] = true;
        }
        while let Some(s) = stack.pop() {
            for &p in &rev[s as usize] {
                if !coreach[p as usize] {
                    coreach[p as usize] = true;
                    stack.push(p);
                }
            }
        }
        reach.iter().zip(&coreach).all(|(a, b)| *a && *b)
    }

    pub fn all_weights_nonnegative(&self) -> bool {
        self.arcs.iter().all(|a| a.weight >= 0.0) && self.finals.iter().all(|w| *w >= 0.0)
    }
}
