use super::{LabeledUtterance, ModelError, TemplateToken};
use crate::text::normalize_tokens;

/// Parses `IntentName utterance text with {Slot}` lines. Blank lines are
/// skipped; the first whitespace-delimited field is the intent.
pub fn parse_sample_utterances(text: &str) -> Result<Vec<LabeledUtterance>, ModelError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let (intent, body) = match trimmed.split_once(char::is_whitespace) {
            Some((i, b)) if !b.trim().is_empty() => (i, b),
            _ => {
                return Err(ModelError::Sample { line, message: "line has no utterance body".into() });
            }
        };
        let template = parse_template(body).map_err(|message| ModelError::Sample { line, message })?;
        out.push(LabeledUtterance { intent: intent.to_string(), template, line: Some(line) });
    }
    Ok(out)
}

/// Splits an utterance template into normalized words and `{Slot}` references.
pub fn parse_template(body: &str) -> Result<Vec<TemplateToken>, String> {
    let mut tokens = Vec::new();
    let mut literal = String::new();
    let mut chars = body.chars();
    while let Some(c) = chars.next() {
        match c {
            '{' => {
                flush_literal(&mut literal, &mut tokens);
                let mut name = String::new();
                let mut closed = false;
                for c in chars.by_ref() {
                    match c {
                        '}' => {
                            closed = true;
                            break;
                        }
                        '{' => return Err("unbalanced braces: nested '{'".into()),
                        _ => name.push(c),
                    }
                }
                if !closed {
                    return Err("unbalanced braces: missing '}'".into());
                }
                let name = name.trim();
                if name.is_empty() {
                    return Err("empty slot reference".into());
                }
                tokens.push(TemplateToken::Slot(name.to_string()));
            }
            '}' => return Err("unbalanced braces: stray '}'".into()),
            _ => literal.push(c),
        }
    }
    flush_literal(&mut literal, &mut tokens);
    Ok(tokens)
}

fn flush_literal(literal: &mut String, tokens: &mut Vec<TemplateToken>) {
    tokens.extend(normalize_tokens(literal).into_iter().map(TemplateToken::Word));
    literal.clear();
}

pub fn format_sample_utterances(samples: &[LabeledUtterance]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&s.intent);
        out.push(' ');
        out.push_str(&s.template_text());
        out.push('\n');
    }
    out
}
