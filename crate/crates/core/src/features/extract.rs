use super::{BloomFilter, FeatureError};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const CLUSTER_PREFIX: &str = "in-cluster:";
const MAX_SPAN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GazetteerSpan {
    pub cluster: String,
    pub start: usize,
    pub end: usize,
}

/// Greedy longest match, left to right, over n-grams of up to four tokens,
/// independently for each gazetteer.
pub fn match_gazetteers(tokens: &[String], gazetteers: &[BloomFilter]) -> Vec<GazetteerSpan> {
    let mut spans = Vec::new();
    for g in gazetteers {
        let mut i = 0;
        while i < tokens.len() {
            let mut best = None;
            for len in 1..=MAX_SPAN.min(tokens.len() - i) {
                let gram = &tokens[i..i + len];
                if g.contains_tokens(gram) {
                    best = Some(len);
                }
                if !g.continues(gram) {
                    break;
                }
            }
            match best {
                Some(len) => {
                    spans.push(GazetteerSpan { cluster: g.name().to_string(), start: i, end: i + len });
                    i += len;
                }
                None => i += 1,
            }
        }
    }
    spans
}

fn word_at(tokens: &[String], i: isize) -> Option<&str> {
    if i < 0 {
        return (i == -1).then_some(BOS);
    }
    let i = i as usize;
    if i < tokens.len() {
        Some(&tokens[i])
    } else {
        (i == tokens.len()).then_some(EOS)
    }
}

/// `Xx`-style shape with runs collapsed: "Taurus" → "Xx", "42nd" → "dx".
fn shape(word: &str) -> String {
    let mut out = String::new();
    for c in word.chars() {
        let s = if c.is_uppercase() {
            'X'
        } else if c.is_alphabetic() {
            'x'
        } else if c.is_ascii_digit() {
            'd'
        } else {
            c
        };
        if !out.ends_with(s) {
            out.push(s);
        }
    }
    out
}

/// Lexical context features for one position plus `in-cluster:<name>` for
/// each gazetteer span covering it. Beyond the sentence edges a single
/// `<s>` / `</s>` marker replaces the missing words.
pub fn extract_tagger_features(
    tokens: &[String],
    position: usize,
    gazetteers: &[BloomFilter],
) -> Result<Vec<String>, FeatureError> {
    if position >= tokens.len() {
        return Err(FeatureError::PositionOutOfRange { position, len: tokens.len() });
    }
    let spans = match_gazetteers(tokens, gazetteers);
    Ok(position_features(tokens, position, &spans))
}

/// Tagger features for every position; gazetteer matching is done once.
pub fn sequence_features(tokens: &[String], gazetteers: &[BloomFilter]) -> Vec<Vec<String>> {
    let spans = match_gazetteers(tokens, gazetteers);
    (0..tokens.len()).map(|i| position_features(tokens, i, &spans)).collect()
}

fn position_features(tokens: &[String], position: usize, spans: &[GazetteerSpan]) -> Vec<String> {
    let p = position as isize;
    let w = &tokens[position];
    let mut f = vec!["bias".to_string()];
    for off in -2isize..=2 {
        if let Some(word) = word_at(tokens, p + off) {
            f.push(format!("w[{off}]={word}"));
        }
    }
    if let Some(prev) = word_at(tokens, p - 1) {
        f.push(format!("b[-1,0]={prev}|{w}"));
    }
    if let Some(next) = word_at(tokens, p + 1) {
        f.push(format!("b[0,1]={w}|{next}"));
    }
    let chars: Vec<char> = w.chars().collect();
    for n in 1..=3.min(chars.len()) {
        f.push(format!("pre{n}={}", chars[..n].iter().collect::<String>()));
        f.push(format!("suf{n}={}", chars[chars.len() - n..].iter().collect::<String>()));
    }
    f.push(format!("shape={}", shape(w)));
    if position == 0 {
        f.push("bos".into());
    }
    if position + 1 == tokens.len() {
        f.push("eos".into());
    }
    for s in spans.iter().filter(|s| s.start <= position && position < s.end) {
        f.push(format!("{CLUSTER_PREFIX}{}", s.cluster));
        let at = if s.start == position { "B" } else { "I" };
        f.push(format!("{CLUSTER_PREFIX}{}@{at}", s.cluster));
    }
    f
}

/// Bag-of-words features for the intent classifier: unigrams, bigrams with
/// sentence markers, and `in-cluster:<name>` per matched gazetteer.
pub fn extract_sentence_features(tokens: &[String], gazetteers: &[BloomFilter]) -> Vec<String> {
    let mut f = vec!["bias".to_string()];
    f.extend(tokens.iter().map(|t| format!("u={t}")));
    let padded: Vec<&str> = std::iter::once(BOS).chain(tokens.iter().map(String::as_str)).chain(std::iter::once(EOS)).collect();
    if !tokens.is_empty() {
        f.extend(padded.windows(2).map(|w| format!("bg={}|{}", w[0], w[1])));
    }
    let mut clusters: Vec<String> = match_gazetteers(tokens, gazetteers).into_iter().map(|s| s.cluster).collect();
    clusters.sort();
    clusters.dedup();
    f.extend(clusters.into_iter().map(|c| format!("{CLUSTER_PREFIX}{c}")));
    f
}
