//! Text normalization shared by the grammar compiler and the statistical
//! feature extractors. Recognizers see lowercase, unpunctuated tokens, so
//! every surface string (samples, slot values, user input) goes through the
//! same function.

/// Lowercase, whitespace-split, and strip leading/trailing punctuation from
/// each token. Tokens that are pure punctuation disappear.
///
/// Inner punctuation such as the apostrophe in `what's` is kept.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}

/// Normalized form of a phrase: tokens joined by single spaces.
pub fn normalize_phrase(text: &str) -> String {
    normalize_tokens(text).join(" ")
}

/// `[A-Za-z][A-Za-z0-9_.]*`
pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Converts `build_ic_model` / `BuildIcModel` style names to `build-ic-model`.
pub fn kebab_case(name: &str) -> String {
    let mut out = String::with_capacity(name.len() + 4);
    let mut prev_lower = false;
    for c in name.chars() {
        if c == '_' || c == ' ' || c == '-' {
            if !out.ends_with('-') && !out.is_empty() {
                out.push('-');
            }
            prev_lower = false;
        } else if c.is_ascii_uppercase() {
            if prev_lower && !out.ends_with('-') {
                out.push('-');
            }
            out.push(c.to_ascii_lowercase());
            prev_lower = false;
        } else {
            out.push(c);
            prev_lower = c.is_ascii_lowercase() || c.is_ascii_digit();
        }
    }
    out.trim_end_matches('-').to_string()
}
