use std::collections::{HashMap, HashSet};

use super::{Arc, GrammarError, OutputSymbol, PriorMode, SymbolTable, WeightSet, WeightedGrammar, EPSILON};
use crate::interaction_model::{BuiltinSlotTypes, InteractionModel, SlotCatalog, TemplateToken};

/// Compiles the model's sample templates into a grammar carrying empirical
/// weights. Slot types resolve against the model's custom types and the
/// bundled builtins.
pub fn build_grammar(model: &InteractionModel) -> Result<WeightedGrammar, GrammarError> {
    build_grammar_with_catalog(model, &SlotCatalog::new(model, &BuiltinSlotTypes::bundled()))
}

pub fn build_grammar_with_catalog(model: &InteractionModel, catalog: &SlotCatalog) -> Result<WeightedGrammar, GrammarError> {
    let mut tries = Vec::new();
    let mut total_samples = 0usize;
    let mut owners: HashMap<&[TemplateToken], &str> = HashMap::new();
    let mut warnings = Vec::new();

    for intent in &model.schema.intents {
        let mut trie = TemplateTrie::new();
        let mut distinct = HashSet::new();
        let mut count = 0usize;
        for (index, sample) in model.samples_for(&intent.name).enumerate() {
            if sample.template.is_empty() {
                return Err(GrammarError::EmptyTemplate { intent: intent.name.clone(), index });
            }
            let first = distinct.insert(sample.template.as_slice());
            trie.insert(&sample.template, first);
            count += 1;
            match owners.get(sample.template.as_slice()) {
                Some(owner) if *owner != intent.name => warnings.push(format!(
                    "template \"{}\" appears in intents {owner} and {}",
                    sample.template_text(),
                    intent.name
                )),
                Some(_) => {}
                None => {
                    owners.insert(sample.template.as_slice(), intent.name.as_str());
                }
            }
        }
        if count > 0 {
            total_samples += count;
            tries.push((intent, trie, count));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let mut e = Emitter::new();
    let start = e.new_state();
    let num_intents = tries.len() as f64;
    let mut value_tries: HashMap<String, ValueTrie> = HashMap::new();

    for (intent, trie, count) in &tries {
        let p_intent = Prob { emp: *count as f64 / total_samples as f64, uni: 1.0 / num_intents };
        let intent_label = e.output(OutputSymbol::Intent(intent.name.clone()));
        let root = &trie.nodes[0];

        let mut slot_children = Vec::new();
        for (token, child) in &root.children {
            match token {
                TemplateToken::Word(w) => {
                    let il = e.input(w);
                    let target = e.new_state();
                    e.arc(start, il, intent_label, target, p_intent.times(trie.branch(0, *child)));
                    e.emit_template_node(trie, *child, target, &intent.name, catalog, &mut value_tries, model)?;
                }
                TemplateToken::Slot(_) => slot_children.push(*child),
            }
        }
        if !slot_children.is_empty() {
            let mass = |f: fn(&TrieNode) -> f64| slot_children.iter().map(|&c| f(&trie.nodes[c])).sum::<f64>();
            let hub_emp = mass(|n| n.raw_through);
            let hub_uni = mass(|n| n.uni_through);
            let hub = e.new_state();
            let to_hub = Prob { emp: hub_emp / root.raw_through, uni: hub_uni / root.uni_through };
            e.arc(start, EPSILON, intent_label, hub, p_intent.times(to_hub));
            for &child in &slot_children {
                let node = &trie.nodes[child];
                let p = Prob { emp: node.raw_through / hub_emp, uni: node.uni_through / hub_uni };
                let TemplateToken::Slot(slot) = trie.token_of(0, child) else { unreachable!() };
                let target = e.new_state();
                e.emit_slot(hub, slot, p, target, &intent.name, catalog, &mut value_tries, model)?;
                e.emit_template_node(trie, child, target, &intent.name, catalog, &mut value_tries, model)?;
            }
        }
    }

    let intents = tries.iter().map(|(i, _, _)| i.name.clone()).collect();
    Ok(e.finish(start, intents, warnings))
}

#[derive(Debug, Clone, Copy)]
struct Prob {
    emp: f64,
    uni: f64,
}

impl Prob {
    fn times(self, other: Prob) -> Prob {
        Prob { emp: self.emp * other.emp, uni: self.uni * other.uni }
    }
}

#[derive(Debug, Default)]
struct TrieNode {
    children: Vec<(TemplateToken, usize)>,
    raw_through: f64,
    uni_through: f64,
    raw_end: f64,
    uni_end: f64,
}

/// Prefix tree over an intent's templates. `raw_*` counts every sample,
/// `uni_*` counts each distinct template once.
struct TemplateTrie {
    nodes: Vec<TrieNode>,
}

impl TemplateTrie {
    fn new() -> Self {
        TemplateTrie { nodes: vec![TrieNode::default()] }
    }

    fn insert(&mut self, template: &[TemplateToken], distinct: bool) {
        let uni = if distinct { 1.0 } else { 0.0 };
        let mut cur = 0;
        self.nodes[0].raw_through += 1.0;
        self.nodes[0].uni_through += uni;
        for tok in template {
            let next = match self.nodes[cur].children.iter().find(|(t, _)| t == tok) {
                Some(&(_, c)) => c,
                None => {
                    self.nodes.push(TrieNode::default());
                    let c = self.nodes.len() - 1;
                    self.nodes[cur].children.push((tok.clone(), c));
                    c
                }
            };
            cur = next;
            self.nodes[cur].raw_through += 1.0;
            self.nodes[cur].uni_through += uni;
        }
        self.nodes[cur].raw_end += 1.0;
        self.nodes[cur].uni_end += uni;
    }

    fn branch(&self, parent: usize, child: usize) -> Prob {
        let (p, c) = (&self.nodes[parent], &self.nodes[child]);
        Prob { emp: c.raw_through / p.raw_through, uni: c.uni_through / p.uni_through }
    }

    fn token_of(&self, parent: usize, child: usize) -> &TemplateToken {
        &self.nodes[parent].children.iter().find(|(_, c)| *c == child).expect("child of parent").0
    }
}

#[derive(Debug, Default)]
struct ValueNode {
    children: Vec<(String, usize)>,
    through: f64,
    end: f64,
}

/// Prefix tree over a slot type's (multi-token) values.
struct ValueTrie {
    nodes: Vec<ValueNode>,
}

impl ValueTrie {
    fn new(values: &[String]) -> Self {
        let mut nodes = vec![ValueNode::default()];
        for v in values {
            let mut cur = 0;
            nodes[0].through += 1.0;
            for tok in v.split(' ') {
                let next = match nodes[cur].children.iter().find(|(t, _)| t == tok) {
                    Some(&(_, c)) => c,
                    None => {
                        nodes.push(ValueNode::default());
                        let c = nodes.len() - 1;
                        nodes[cur].children.push((tok.to_string(), c));
                        c
                    }
                };
                cur = next;
                nodes[cur].through += 1.0;
            }
            nodes[cur].end += 1.0;
        }
        ValueTrie { nodes }
    }
}

struct ProtoArc {
    ilabel: u32,
    olabel: u32,
    next: u32,
    p: Prob,
}

struct Emitter {
    states: Vec<Vec<ProtoArc>>,
    finals: Vec<Option<Prob>>,
    isyms: SymbolTable,
    osyms: SymbolTable,
    okinds: Vec<OutputSymbol>,
}

impl Emitter {
    fn new() -> Self {
        Emitter {
            states: Vec::new(),
            finals: Vec::new(),
            isyms: SymbolTable::new(),
            osyms: SymbolTable::new(),
            okinds: vec![OutputSymbol::Epsilon],
        }
    }

    fn new_state(&mut self) -> u32 {
        self.states.push(Vec::new());
        self.finals.push(None);
        (self.states.len() - 1) as u32
    }

    fn input(&mut self, token: &str) -> u32 {
        self.isyms.intern(token)
    }

    fn output(&mut self, sym: OutputSymbol) -> u32 {
        let id = self.osyms.intern(&sym.render());
        if id as usize == self.okinds.len() {
            self.okinds.push(sym);
        }
        id
    }

    fn arc(&mut self, from: u32, ilabel: u32, olabel: u32, next: u32, p: Prob) {
        self.states[from as usize].push(ProtoArc { ilabel, olabel, next, p });
    }

    #[allow(clippy::too_many_arguments)]
    fn emit_template_node(
        &mut self,
        trie: &TemplateTrie,
        node_idx: usize,
        state: u32,
        intent: &str,
        catalog: &SlotCatalog,
        value_tries: &mut HashMap<String, ValueTrie>,
        model: &InteractionModel,
    ) -> Result<(), GrammarError> {
        let node = &trie.nodes[node_idx];
        if node.raw_end > 0.0 {
            self.finals[state as usize] =
                Some(Prob { emp: node.raw_end / node.raw_through, uni: node.uni_end / node.uni_through });
        }
        for (token, child) in &node.children {
            let p = trie.branch(node_idx, *child);
            let target = self.new_state();
            match token {
                TemplateToken::Word(w) => {
                    let il = self.input(w);
                    self.arc(state, il, EPSILON, target, p);
                }
                TemplateToken::Slot(slot) => {
                    self.emit_slot(state, slot, p, target, intent, catalog, value_tries, model)?;
                }
            }
            self.emit_template_node(trie, *child, target, intent, catalog, value_tries, model)?;
        }
        Ok(())
    }

    /// `state --eps:<slot>--> value trie --eps:</slot>--> target`
    #[allow(clippy::too_many_arguments)]
    fn emit_slot(
        &mut self,
        state: u32,
        slot: &str,
        p_open: Prob,
        target: u32,
        intent: &str,
        catalog: &SlotCatalog,
        value_tries: &mut HashMap<String, ValueTrie>,
        model: &InteractionModel,
    ) -> Result<(), GrammarError> {
        let decl = model
            .schema
            .intent(intent)
            .and_then(|i| i.slot(slot))
            .ok_or_else(|| GrammarError::UndeclaredSlot { intent: intent.to_string(), slot: slot.to_string() })?;
        if !value_tries.contains_key(&decl.slot_type) {
            let values = catalog.values(&decl.slot_type).ok_or_else(|| GrammarError::UnknownSlotType(decl.slot_type.clone()))?;
            if values.is_empty() {
                return Err(GrammarError::EmptySlotType(decl.slot_type.clone()));
            }
            value_tries.insert(decl.slot_type.clone(), ValueTrie::new(values));
        }
        let vt = &value_tries[&decl.slot_type];
        let open = self.output(OutputSymbol::SlotOpen(slot.to_string()));
        let close = self.output(OutputSymbol::SlotClose(slot.to_string()));
        let entry = self.new_state();
        self.arc(state, EPSILON, open, entry, p_open);
        self.emit_value_node(vt, 0, entry, close, target);
        Ok(())
    }

    fn emit_value_node(&mut self, vt: &ValueTrie, idx: usize, state: u32, close: u32, target: u32) {
        let node = &vt.nodes[idx];
        if node.end > 0.0 {
            let p = node.end / node.through;
            self.arc(state, EPSILON, close, target, Prob { emp: p, uni: p });
        }
        for (tok, child) in &node.children {
            let p = vt.nodes[*child].through / node.through;
            let il = self.input(tok);
            let next = self.new_state();
            self.arc(state, il, EPSILON, next, Prob { emp: p, uni: p });
            self.emit_value_node(vt, *child, next, close, target);
        }
    }

    fn finish(self, start: u32, intents: Vec<String>, warnings: Vec<String>) -> WeightedGrammar {
        let to_w = |p: f64| -p.ln() + 0.0;
        let mut offsets = Vec::with_capacity(self.states.len() + 1);
        let mut arcs = Vec::new();
        let mut emp_arcs = Vec::new();
        let mut uni_arcs = Vec::new();
        offsets.push(0u32);
        for mut out in self.states {
            // epsilon-input arcs first, then by input label; stable keeps insertion order
            out.sort_by_key(|a| a.ilabel);
            for a in out {
                arcs.push(Arc { ilabel: a.ilabel, olabel: a.olabel, weight: to_w(a.p.emp), nextstate: a.next });
                emp_arcs.push(to_w(a.p.emp));
                uni_arcs.push(to_w(a.p.uni));
            }
            offsets.push(arcs.len() as u32);
        }
        let emp_finals: Vec<f64> = self.finals.iter().map(|f| f.map_or(f64::INFINITY, |p| to_w(p.emp))).collect();
        let uni_finals: Vec<f64> = self.finals.iter().map(|f| f.map_or(f64::INFINITY, |p| to_w(p.uni))).collect();
        WeightedGrammar {
            input_symbols: self.isyms,
            output_symbols: self.osyms,
            output_kinds: self.okinds,
            start,
            offsets,
            arcs,
            finals: emp_finals.clone(),
            empirical: WeightSet { arcs: emp_arcs, finals: emp_finals },
            uniform: WeightSet { arcs: uni_arcs, finals: uni_finals },
            prior: PriorMode::Empirical,
            intents,
            warnings,
        }
    }
}
