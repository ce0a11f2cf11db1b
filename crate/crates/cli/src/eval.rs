use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use serde::Serialize;
use skillforge::frame::SemanticFrame;
use skillforge::runtime::{ModelStore, NluPath, SkillRuntime};

use crate::{failure, usage, CliResult, Globals};

pub fn command() -> Command {
    Command::new("eval")
        .about("Score a stored skill against a gold test file")
        .long_about(
            "Each test line is `Intent word word ...`, optionally followed by a tab and the gold frame JSON\n\
             (the format `sample` prints). Lines without a frame are scored for intent only.",
        )
        .arg(Arg::new("skill").value_name("SKILL").required(true))
        .arg(Arg::new("file").value_name("TEST_FILE").required(true).value_parser(value_parser!(PathBuf)))
        .arg(Arg::new("json").long("json").action(ArgAction::SetTrue).help("Print only the JSON report"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldExample {
    pub line: usize,
    pub intent: String,
    pub text: String,
    pub frame: Option<SemanticFrame>,
}

/// Parses a test file. Malformed lines come back as `(line, reason)`.
pub fn parse_test_file(text: &str) -> (Vec<GoldExample>, Vec<(usize, String)>) {
    let mut examples = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let (head, frame_text) = match raw.split_once('\t') {
            Some((h, f)) => (h, Some(f)),
            None => (raw, None),
        };
        let mut words = head.split_whitespace();
        let intent = words.next().unwrap_or_default().to_string();
        let text = words.collect::<Vec<_>>().join(" ");
        if text.is_empty() {
            errors.push((line, "expected an intent followed by an utterance".into()));
            continue;
        }
        let frame = match frame_text.map(serde_json::from_str::<SemanticFrame>) {
            None => None,
            Some(Ok(f)) if f.intent == intent => Some(f),
            Some(Ok(f)) => {
                errors.push((line, format!("frame intent {} does not match {intent}", f.intent)));
                continue;
            }
            Some(Err(e)) => {
                errors.push((line, format!("bad frame JSON: {e}")));
                continue;
            }
        };
        examples.push(GoldExample { line, intent, text, frame });
    }
    (examples, errors)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub examples: usize,
    pub intent_accuracy: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    /// Exact match on slot name, token span and value.
    pub slot_f1: f64,
    pub slot_examples: usize,
    pub deterministic_coverage: f64,
    pub out_of_domain: usize,
}

type SlotKey = (String, (usize, usize), String);

fn slot_set(frame: &SemanticFrame) -> BTreeSet<SlotKey> {
    frame.slots.iter().map(|(n, f)| (n.clone(), f.span, f.value.clone())).collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate(rt: &SkillRuntime, examples: &[GoldExample]) -> EvalReport {
    let (mut correct, mut deterministic, mut ood) = (0, 0, 0);
    let (mut tp, mut fp, mut fn_, mut slot_examples) = (0usize, 0usize, 0usize, 0);
    for ex in examples {
        let result = rt.understand(&ex.text);
        match result.path() {
            NluPath::Deterministic => deterministic += 1,
            NluPath::OutOfDomain => ood += 1,
            NluPath::Statistical => {}
        }
        if result.frame.as_ref().is_some_and(|f| f.intent == ex.intent) {
            correct += 1;
        }
        if let Some(gold) = &ex.frame {
            slot_examples += 1;
            let gold = slot_set(gold);
            let pred = result.frame.as_ref().map(slot_set).unwrap_or_default();
            let hit = gold.intersection(&pred).count();
            tp += hit;
            fp += pred.len() - hit;
            fn_ += gold.len() - hit;
        }
    }
    let n = examples.len();
    EvalReport {
        examples: n,
        intent_accuracy: ratio(correct, n),
        slot_precision: ratio(tp, tp + fp),
        slot_recall: ratio(tp, tp + fn_),
        slot_f1: ratio(2 * tp, 2 * tp + fp + fn_),
        slot_examples,
        deterministic_coverage: ratio(deterministic, n),
        out_of_domain: ood,
    }
}

pub fn run(g: &Globals, m: &ArgMatches) -> CliResult {
    let skill = m.get_one::<String>("skill").expect("required");
    let path = m.get_one::<PathBuf>("file").expect("required");
    let bundle = ModelStore::open(&g.store).load(skill, None).map_err(|e| usage(format!("{skill}: {e}")))?;
    let rt = SkillRuntime::new(bundle, g.config.nlu).map_err(failure)?;
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let (mut examples, mut errors) = parse_test_file(&text);
    let schema = &rt.bundle().schema;
    examples.retain(|ex| {
        let known = schema.intent(&ex.intent).is_some();
        if !known {
            errors.push((ex.line, format!("skill has no intent {}", ex.intent)));
        }
        known
    });
    errors.sort();
    for (line, reason) in &errors {
        eprintln!("{}:{line}: skipped: {reason}", path.display());
    }
    if examples.is_empty() {
        return Err(usage(format!("{}: no test examples", path.display())));
    }
    let report = evaluate(&rt, &examples);
    let json = serde_json::to_string(&report).expect("report serializes");
    if !m.get_flag("json") {
        println!("skill                   {} v{}", rt.skill_id(), rt.version());
        println!("examples                {} ({} skipped)", report.examples, errors.len());
        println!("intent accuracy         {:.4}", report.intent_accuracy);
        println!(
            "slot F1 (exact span)    {:.4}  (P {:.4}, R {:.4}, {} examples)",
            report.slot_f1, report.slot_precision, report.slot_recall, report.slot_examples
        );
        println!("deterministic coverage  {:.4}", report.deterministic_coverage);
        println!("out of domain           {}", report.out_of_domain);
    }
    println!("{json}");
    Ok(())
}
