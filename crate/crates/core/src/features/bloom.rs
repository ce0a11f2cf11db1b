use std::collections::BTreeSet;
use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use twox_hash::XxHash64;

use super::FeatureError;

pub const DEFAULT_FPR: f64 = 0.01;
const MAGIC: &[u8; 4] = b"SFBF";
const SEED_A: u64 = 0x5eed_0001;
const SEED_B: u64 = 0x5eed_0002;

/// Gazetteer encoded as a bloom filter. Whole values are stored under a
/// `v` key and every proper token prefix of a multi-token value under a `p`
/// key, so span matching can stop extending as soon as no value continues.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomFilter {
    name: String,
    m: u64,
    k: u32,
    seeds: (u64, u64),
    count: u64,
    bits: Vec<u64>,
}

/// Sizes the filter with the textbook formulas for the number of distinct
/// keys actually inserted (values plus prefix keys).
pub fn build_bloom_filter(name: &str, values: &[String], target_fpr: f64) -> Result<BloomFilter, FeatureError> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(FeatureError::BadFpr(target_fpr));
    }
    let mut keys = BTreeSet::new();
    for v in values {
        let toks = crate::text::normalize_tokens(v);
        if toks.is_empty() {
            continue;
        }
        for len in 1..toks.len() {
            keys.insert(prefix_key(&toks[..len]));
        }
        keys.insert(value_key(&toks));
    }
    if keys.is_empty() {
        return Err(FeatureError::EmptyValues);
    }
    let (m, k) = BloomFilter::optimal_params(keys.len(), target_fpr);
    let mut bf = BloomFilter::with_params(name, m, k);
    for key in &keys {
        bf.insert_key(key);
    }
    Ok(bf)
}

fn value_key(tokens: &[String]) -> String {
    format!("v\x1f{}", tokens.join(" "))
}

fn prefix_key(tokens: &[String]) -> String {
    format!("p\x1f{}", tokens.join(" "))
}

impl BloomFilter {
    /// `m = ceil(-n ln p / ln²2)`, `k = round(m/n · ln 2)` (at least 1).
    pub fn optimal_params(n: usize, p: f64) -> (u64, u32) {
        let ln2 = std::f64::consts::LN_2;
        let m = (-(n as f64) * p.ln() / (ln2 * ln2)).ceil().max(1.0) as u64;
        let k = ((m as f64 / n as f64) * ln2).round().max(1.0) as u32;
        (m, k)
    }

    pub fn with_params(name: &str, m: u64, k: u32) -> Self {
        BloomFilter {
            name: name.to_string(),
            m,
            k,
            seeds: (SEED_A, SEED_B),
            count: 0,
            bits: vec![0; m.div_ceil(64) as usize],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_bits(&self) -> u64 {
        self.m
    }

    pub fn num_hashes(&self) -> u32 {
        self.k
    }

    /// Number of keys inserted.
    pub fn count(&self) -> u64 {
        self.count
    }

    fn positions(&self, key: &str) -> impl Iterator<Item = u64> {
        let h1 = XxHash64::oneshot(self.seeds.0, key.as_bytes());
        // odd step so the probe sequence never collapses onto one bit
        let h2 = XxHash64::oneshot(self.seeds.1, key.as_bytes()) | 1;
        let m = self.m;
        (0..self.k as u64).map(move |i| h1.wrapping_add(i.wrapping_mul(h2)) % m)
    }

    pub fn insert_key(&mut self, key: &str) {
        let pos: Vec<u64> = self.positions(key).collect();
        for p in pos {
            self.bits[(p / 64) as usize] |= 1 << (p % 64);
        }
        self.count += 1;
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.positions(key).all(|p| self.bits[(p / 64) as usize] & (1 << (p % 64)) != 0)
    }

    /// Membership of a whole value (normalized like the inserted values).
    pub fn contains(&self, value: &str) -> bool {
        self.contains_tokens(&crate::text::normalize_tokens(value))
    }

    pub fn contains_tokens(&self, tokens: &[String]) -> bool {
        !tokens.is_empty() && self.contains_key(&value_key(tokens))
    }

    /// Some inserted value starts with `tokens` and is strictly longer.
    pub fn continues(&self, tokens: &[String]) -> bool {
        !tokens.is_empty() && self.contains_key(&prefix_key(tokens))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), FeatureError> {
        w.write_all(MAGIC)?;
        w.write_u64::<LE>(self.m)?;
        w.write_u32::<LE>(self.k)?;
        w.write_u64::<LE>(self.seeds.0)?;
        w.write_u64::<LE>(self.seeds.1)?;
        w.write_u64::<LE>(self.count)?;
        w.write_u32::<LE>(self.name.len() as u32)?;
        w.write_all(self.name.as_bytes())?;
        for word in &self.bits {
            w.write_u64::<LE>(*word)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, FeatureError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FeatureError::Format("bad magic".into()));
        }
        let m = r.read_u64::<LE>()?;
        let k = r.read_u32::<LE>()?;
        if m == 0 || k == 0 || m > 1 << 40 {
            return Err(FeatureError::Format(format!("implausible size m={m} k={k}")));
        }
        let seeds = (r.read_u64::<LE>()?, r.read_u64::<LE>()?);
        let count = r.read_u64::<LE>()?;
        let len = r.read_u32::<LE>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| FeatureError::Format("name is not UTF-8".into()))?;
        let bits = (0..m.div_ceil(64)).map(|_| r.read_u64::<LE>()).collect::<Result<_, _>>()?;
        Ok(BloomFilter { name, m, k, seeds, count, bits })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        Self::read(&mut &bytes[..])
    }
}
