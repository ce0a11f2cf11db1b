use serde::Serialize;

use super::SkillRuntime;
use crate::frame::{SemanticFrame, SlotFill};
use crate::interaction_model::IntentDecl;
use crate::text::{normalize_phrase, normalize_tokens};

/// Failed answers to the same question before the dialogue escalates.
pub const MAX_FAILURES: u32 = 3;

const YES: &[&str] = &["yes", "yeah", "yep", "yup", "sure", "correct", "right", "ok", "okay", "yes please", "that's right", "thats right", "affirmative"];
const NO: &[&str] = &["no", "nope", "nah", "no thanks", "wrong", "incorrect", "not really", "negative"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DialoguePhase {
    /// No pending request.
    Idle,
    Eliciting,
    Confirming,
    Fulfilled,
    /// Gave up on the current request after repeated failures.
    Escalated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DialogueState {
    pub skill_id: String,
    pub pending: Option<SemanticFrame>,
    /// Required slots still empty, in declaration order.
    pub missing: Vec<String>,
    pub phase: DialoguePhase,
    /// Consecutive failed answers to the current question.
    pub failures: u32,
    /// Steps taken on the pending request.
    pub turns: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DialogueDirective {
    ElicitSlot { slot: String, prompt: String },
    ConfirmIntent { prompt: String },
    Fulfill { frame: SemanticFrame },
    /// Terminal re-elicitation with the full prompt.
    Escalate { slot: Option<String>, prompt: String },
    /// Input could not be mapped to any intent of the skill.
    Unhandled { reason: String },
}

impl DialogueDirective {
    pub fn is_terminal(&self) -> bool {
        matches!(self, DialogueDirective::Fulfill { .. } | DialogueDirective::Escalate { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DialogueInput {
    Frame(SemanticFrame),
    Answer(String),
}

/// Upper bound on steps for one request: the opening turn plus
/// `MAX_FAILURES` tries for every question (each required slot and the
/// confirmation).
pub fn step_budget(intent: &IntentDecl) -> u32 {
    let questions = intent.slots.iter().filter(|s| s.required).count() as u32 + u32::from(intent.confirmation_required);
    1 + MAX_FAILURES * questions
}

pub fn slot_prompt(intent: &IntentDecl, slot: &str) -> String {
    intent.slot(slot).and_then(|s| s.prompt.clone()).unwrap_or_else(|| format!("What {slot}?"))
}

fn confirmation_prompt(intent: &IntentDecl, frame: &SemanticFrame) -> String {
    if let Some(p) = &intent.confirmation_prompt {
        let mut out = p.clone();
        for (name, fill) in &frame.slots {
            out = out.replace(&format!("{{{name}}}"), &fill.value);
        }
        return out;
    }
    let filled: Vec<String> = intent
        .slots
        .iter()
        .filter_map(|s| frame.slot_value(&s.name).map(|v| format!("{} {v}", s.name)))
        .collect();
    if filled.is_empty() {
        format!("Do you want {}?", intent.name)
    } else {
        format!("Do you want {} with {}?", intent.name, filled.join(", "))
    }
}

fn yes_no(text: &str) -> Option<bool> {
    let p = normalize_phrase(text);
    if YES.contains(&p.as_str()) {
        Some(true)
    } else if NO.contains(&p.as_str()) {
        Some(false)
    } else {
        None
    }
}

impl DialogueState {
    pub fn new(skill_id: impl Into<String>) -> Self {
        DialogueState {
            skill_id: skill_id.into(),
            pending: None,
            missing: Vec::new(),
            phase: DialoguePhase::Idle,
            failures: 0,
            turns: 0,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.phase, DialoguePhase::Fulfilled | DialoguePhase::Escalated)
    }

    /// Fulfilled implies nothing is missing.
    pub fn is_consistent(&self) -> bool {
        match self.phase {
            DialoguePhase::Idle => self.pending.is_none(),
            DialoguePhase::Fulfilled => self.missing.is_empty() && self.pending.is_some(),
            DialoguePhase::Eliciting => !self.missing.is_empty(),
            _ => self.pending.is_some(),
        }
    }
}

struct Stepper<'a> {
    rt: &'a SkillRuntime,
    state: DialogueState,
}

impl Stepper<'_> {
    fn intent(&self) -> Option<&IntentDecl> {
        self.state.pending.as_ref().and_then(|f| self.rt.intent_decl(&f.intent))
    }

    fn start(mut self, mut frame: SemanticFrame) -> (DialogueState, DialogueDirective) {
        let skill_id = self.state.skill_id.clone();
        let Some(decl) = self.rt.intent_decl(&frame.intent) else {
            let reason = format!("intent {} is not part of skill {skill_id}", frame.intent);
            return (DialogueState::new(skill_id), DialogueDirective::Unhandled { reason });
        };
        frame.slots.retain(|name, _| decl.slot(name).is_some());
        self.state = DialogueState::new(skill_id);
        self.state.pending = Some(frame);
        self.state.turns = 1;
        self.refresh_missing();
        self.advance()
    }

    fn refresh_missing(&mut self) {
        let frame = self.state.pending.as_ref().expect("pending frame");
        let decl = self.rt.intent_decl(&frame.intent).expect("known intent");
        self.state.missing =
            decl.slots.iter().filter(|s| s.required && !frame.slots.contains_key(&s.name)).map(|s| s.name.clone()).collect();
    }

    /// Next question for the pending frame, or fulfillment.
    fn advance(mut self) -> (DialogueState, DialogueDirective) {
        let decl = self.intent().expect("pending intent").clone();
        let frame = self.state.pending.clone().expect("pending frame");
        let directive = if let Some(slot) = self.state.missing.first() {
            self.state.phase = DialoguePhase::Eliciting;
            DialogueDirective::ElicitSlot { slot: slot.clone(), prompt: slot_prompt(&decl, slot) }
        } else if decl.confirmation_required && self.state.phase != DialoguePhase::Confirming {
            self.state.phase = DialoguePhase::Confirming;
            DialogueDirective::ConfirmIntent { prompt: confirmation_prompt(&decl, &frame) }
        } else if decl.confirmation_required {
            DialogueDirective::ConfirmIntent { prompt: confirmation_prompt(&decl, &frame) }
        } else {
            self.state.phase = DialoguePhase::Fulfilled;
            DialogueDirective::Fulfill { frame }
        };
        self.finish(directive)
    }

    fn escalate(mut self) -> (DialogueState, DialogueDirective) {
        let decl = self.intent().expect("pending intent").clone();
        self.state.phase = DialoguePhase::Escalated;
        let slot = self.state.missing.first().cloned();
        let prompt = match &slot {
            Some(s) => {
                let ty = decl.slot(s).map(|d| d.slot_type.as_str()).unwrap_or("");
                let examples: Vec<&str> = self
                    .rt
                    .bundle()
                    .slot_values
                    .get(ty)
                    .map(|v| v.iter().take(2).map(String::as_str).collect())
                    .unwrap_or_default();
                let base = slot_prompt(&decl, s);
                match examples.as_slice() {
                    [a, b] => format!("Sorry, I still didn't get that. {base} For example, {a} or {b}."),
                    [a] => format!("Sorry, I still didn't get that. {base} For example, {a}."),
                    _ => format!("Sorry, I still didn't get that. {base}"),
                }
            }
            None => {
                let frame = self.state.pending.as_ref().expect("pending frame");
                format!("Sorry, I still didn't get that. {} Please say yes or no.", confirmation_prompt(&decl, frame))
            }
        };
        (self.state, DialogueDirective::Escalate { slot, prompt })
    }

    fn fail(mut self) -> (DialogueState, DialogueDirective) {
        self.state.failures += 1;
        if self.state.failures >= MAX_FAILURES {
            return self.escalate();
        }
        let decl = self.intent().expect("pending intent").clone();
        let directive = match self.state.phase {
            DialoguePhase::Confirming => {
                DialogueDirective::ConfirmIntent { prompt: confirmation_prompt(&decl, self.state.pending.as_ref().unwrap()) }
            }
            _ => {
                let slot = self.state.missing[0].clone();
                DialogueDirective::ElicitSlot { prompt: slot_prompt(&decl, &slot), slot }
            }
        };
        self.finish(directive)
    }

    /// Enforces the step budget on non-terminal outcomes.
    fn finish(self, directive: DialogueDirective) -> (DialogueState, DialogueDirective) {
        if !directive.is_terminal() {
            if let Some(decl) = self.intent() {
                if self.state.turns >= step_budget(decl) {
                    return self.escalate();
                }
            }
        }
        (self.state, directive)
    }

    fn fill(&mut self, slot: &str, value: String, len: usize) {
        let frame = self.state.pending.as_mut().expect("pending frame");
        frame.slots.insert(slot.to_string(), SlotFill { value, span: (0, len) });
        self.state.failures = 0;
        self.refresh_missing();
    }

    fn answer(mut self, text: &str) -> (DialogueState, DialogueDirective) {
        self.state.turns += 1;
        match self.state.phase {
            DialoguePhase::Eliciting => {
                let slot = self.state.missing[0].clone();
                let decl = self.intent().expect("pending intent").clone();
                let ty = decl.slot(&slot).map(|s| s.slot_type.clone()).unwrap_or_default();
                let value = self.rt.recognize_slot_value(&ty, text).or_else(|| {
                    let r = self.rt.understand(text);
                    r.frame.filter(|f| f.intent == decl.name).and_then(|f| f.slot_value(&slot).map(str::to_string))
                });
                match value {
                    Some(v) => {
                        self.fill(&slot, v, normalize_tokens(text).len());
                        self.advance()
                    }
                    None => self.fail(),
                }
            }
            DialoguePhase::Confirming => match yes_no(text) {
                Some(true) => {
                    self.state.phase = DialoguePhase::Fulfilled;
                    let frame = self.state.pending.clone().expect("pending frame");
                    (self.state, DialogueDirective::Fulfill { frame })
                }
                Some(false) => {
                    let decl = self.intent().expect("pending intent").clone();
                    let first = decl.slots.iter().find(|s| s.required).or(decl.slots.first()).map(|s| s.name.clone());
                    match first {
                        Some(slot) => {
                            self.state.pending.as_mut().unwrap().slots.remove(&slot);
                            self.state.missing = vec![slot.clone()];
                            self.state.failures = 0;
                            self.state.phase = DialoguePhase::Eliciting;
                            let prompt = slot_prompt(&decl, &slot);
                            self.finish(DialogueDirective::ElicitSlot { slot, prompt })
                        }
                        None => {
                            self.state.missing.clear();
                            self.escalate()
                        }
                    }
                }
                None => self.fail(),
            },
            _ => unreachable!("answers only reach active dialogues"),
        }
    }
}

/// Advances the dialogue by one user turn. Idle or finished dialogues start
/// over with the new request; answers are re-recognized against the slot
/// being elicited.
pub fn dialogue_step(rt: &SkillRuntime, state: DialogueState, input: DialogueInput) -> (DialogueState, DialogueDirective) {
    let active = matches!(state.phase, DialoguePhase::Eliciting | DialoguePhase::Confirming);
    let stepper = Stepper { rt, state };
    match input {
        DialogueInput::Frame(frame) => {
            let same = stepper.state.pending.as_ref().is_some_and(|p| p.intent == frame.intent);
            if active && same {
                let mut stepper = stepper;
                stepper.state.turns += 1;
                let before = stepper.state.missing.len();
                for (k, v) in frame.slots {
                    if stepper.intent().is_some_and(|d| d.slot(&k).is_some()) {
                        stepper.state.pending.as_mut().unwrap().slots.insert(k, v);
                    }
                }
                stepper.refresh_missing();
                if stepper.state.missing.len() < before {
                    stepper.state.failures = 0;
                    stepper.advance()
                } else {
                    stepper.fail()
                }
            } else {
                stepper.start(frame)
            }
        }
        DialogueInput::Answer(text) => {
            if active {
                stepper.answer(&text)
            } else {
                let r = rt.understand(&text);
                match r.frame {
                    Some(frame) => stepper.start(frame),
                    None => {
                        let reason = r.diagnostics.reason.unwrap_or_else(|| "out of domain".into());
                        (DialogueState::new(stepper.state.skill_id), DialogueDirective::Unhandled { reason })
                    }
                }
            }
        }
    }
}
