//! Tokenization and feature extraction for the statistical models.
//!
//! Features are produced as names (`w[0]=taurus`, `in-cluster:ZODIAC`) and
//! encoded into sparse vectors either by hashing ([`FeatureHasher`]) or by an
//! exact dictionary ([`FeatureIndex`]).

mod bloom;
mod encode;
mod extract;

use rand::Rng;
use thiserror::Error;

pub use bloom::{build_bloom_filter, BloomFilter, DEFAULT_FPR};
pub use encode::{hash_features, Encoder, FeatureHasher, FeatureIndex, FeatureVector, DEFAULT_HASH_BITS};
pub use extract::{
    extract_sentence_features, extract_tagger_features, match_gazetteers, sequence_features, GazetteerSpan,
    BOS, CLUSTER_PREFIX, EOS,
};

pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("bloom filter needs at least one value")]
    EmptyValues,
    #[error("false-positive rate must be in (0, 1), got {0}")]
    BadFpr(f64),
    #[error("position {position} out of range for {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("dropout rate must be in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("hash bits must be in 1..=30, got {0}")]
    BadBits(u32),
    #[error("bloom filter format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercased, whitespace-split, punctuation-stripped tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    crate::text::normalize_tokens(text)
}

/// Training-time regularizer: drops each knowledge-base feature
/// (`in-cluster:*`) independently with probability `rate`.
pub fn apply_knowledge_dropout<R: Rng>(features: Vec<String>, rate: f64, rng: &mut R) -> Result<Vec<String>, FeatureError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(FeatureError::BadDropout(rate));
    }
    if rate == 0.0 {
        return Ok(features);
    }
    Ok(features.into_iter().filter(|f| !f.starts_with(CLUSTER_PREFIX) || rng.gen::<f64>() >= rate).collect())
}
