use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use twox_hash::XxHash64;

use super::FeatureError;

pub const DEFAULT_HASH_BITS: u32 = 18;

/// Sparse vector with sorted, unique ids below `dim`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    pub dim: usize,
    pub entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    /// Sorts and merges duplicate ids by summing their values.
    pub fn from_unsorted(dim: usize, mut raw: Vec<(u32, f64)>) -> Self {
        raw.sort_unstable_by_key(|e| e.0);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(raw.len());
        for (id, v) in raw {
            match entries.last_mut() {
                Some(last) if last.0 == id => last.1 += v,
                _ => entries.push((id, v)),
            }
        }
        FeatureVector { dim, entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u32) -> f64 {
        self.entries.binary_search_by_key(&id, |e| e.0).map_or(0.0, |i| self.entries[i].1)
    }
}

/// Signed feature hashing: the low `bits` bits of a seeded 64-bit hash pick
/// the column and the top bit picks the sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHasher {
    bits: u32,
    seed: u64,
}

impl FeatureHasher {
    pub fn new(bits: u32, seed: u64) -> Result<Self, FeatureError> {
        if !(1..=30).contains(&bits) {
            return Err(FeatureError::BadBits(bits));
        }
        Ok(FeatureHasher { bits, seed })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        1 << self.bits
    }

    pub fn index(&self, name: &str) -> (u32, f64) {
        let h = XxHash64::oneshot(self.seed, name.as_bytes());
        let id = (h & ((1u64 << self.bits) - 1)) as u32;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        (id, sign)
    }

    pub fn encode<S: AsRef<str>>(&self, names: &[S]) -> FeatureVector {
        FeatureVector::from_unsorted(self.dim(), names.iter().map(|n| self.index(n.as_ref())).collect())
    }
}

pub fn hash_features<S: AsRef<str>>(names: &[S], bits: u32, seed: u64) -> Result<FeatureVector, FeatureError> {
    Ok(FeatureHasher::new(bits, seed)?.encode(names))
}

/// Exact dictionary encoding; features unseen at fit time are dropped.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureIndex {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl FeatureIndex {
    pub fn fit<'a, I, S>(feature_lists: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut idx = FeatureIndex::default();
        for list in feature_lists {
            for n in list {
                idx.add(n.as_ref());
            }
        }
        idx
    }

    pub fn add(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn encode<S: AsRef<str>>(&self, names: &[S]) -> FeatureVector {
        let raw = names.iter().filter_map(|n| self.ids.get(n.as_ref()).map(|&id| (id, 1.0))).collect();
        FeatureVector::from_unsorted(self.dim(), raw)
    }
}

/// How named features become vector columns; stored with each model.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Hashed(FeatureHasher),
    Indexed(FeatureIndex),
}

impl Encoder {
    pub fn dim(&self) -> usize {
        match self {
            Encoder::Hashed(h) => h.dim(),
            Encoder::Indexed(i) => i.dim(),
        }
    }

    pub fn encode<S: AsRef<str>>(&self, names: &[S]) -> FeatureVector {
        match self {
            Encoder::Hashed(h) => h.encode(names),
            Encoder::Indexed(i) => i.encode(names),
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        match self {
            Encoder::Hashed(h) => {
                w.write_u8(0)?;
                w.write_u32::<LE>(h.bits)?;
                w.write_u64::<LE>(h.seed)
            }
            Encoder::Indexed(i) => {
                w.write_u8(1)?;
                w.write_u32::<LE>(i.names.len() as u32)?;
                for n in &i.names {
                    w.write_u32::<LE>(n.len() as u32)?;
                    w.write_all(n.as_bytes())?;
                }
                Ok(())
            }
        }
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, FeatureError> {
        match r.read_u8()? {
            0 => {
                let bits = r.read_u32::<LE>()?;
                let seed = r.read_u64::<LE>()?;
                Ok(Encoder::Hashed(FeatureHasher::new(bits, seed)?))
            }
            1 => {
                let n = r.read_u32::<LE>()?;
                let mut idx = FeatureIndex::default();
                for _ in 0..n {
                    let len = r.read_u32::<LE>()? as usize;
                    let mut buf = vec![0u8; len];
                    r.read_exact(&mut buf)?;
                    idx.add(&String::from_utf8(buf).map_err(|_| FeatureError::Format("feature name is not UTF-8".into()))?);
                }
                Ok(Encoder::Indexed(idx))
            }
            t => Err(FeatureError::Format(format!("unknown encoder tag {t}"))),
        }
    }
}
