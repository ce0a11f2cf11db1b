use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::RuntimeError;
use crate::features::BloomFilter;
use crate::grammar::WeightedGrammar;
use crate::interaction_model::IntentSchema;
use crate::models::{QuantizedCrf, QuantizedMaxEnt};

const MAGIC: &[u8; 4] = b"SFSB";
pub const BUNDLE_FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Everything the runtime needs for one skill version. Serialized as a
/// single blob ending in a SHA-256 of all preceding bytes; no timestamps, so
/// identical inputs give identical bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillModelBundle {
    pub skill_id: String,
    /// Zero until the bundle is stored.
    pub version: u64,
    /// Digest of the interaction model every component was built from.
    pub model_digest: String,
    pub config_digest: String,
    pub schema: IntentSchema,
    pub invocation_name: String,
    /// Slot type → values, for slot-restricted re-recognition.
    pub slot_values: BTreeMap<String, Vec<String>>,
    pub grammar: WeightedGrammar,
    pub intent_model: QuantizedMaxEnt,
    pub slot_model: QuantizedCrf,
    pub gazetteers: Vec<BloomFilter>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    write_block(w, s.as_bytes())
}

fn write_block<W: Write>(w: &mut W, b: &[u8]) -> std::io::Result<()> {
    w.write_u64::<LE>(b.len() as u64)?;
    w.write_all(b)
}

fn read_block(r: &mut Cursor<&[u8]>) -> Result<Vec<u8>, RuntimeError> {
    let n = r.read_u64::<LE>()? as usize;
    let left = r.get_ref().len() - r.position() as usize;
    if n > left {
        return Err(RuntimeError::Format(format!("block of {n} bytes overruns the bundle")));
    }
    let mut buf = vec![0; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn json<T: serde::de::DeserializeOwned>(b: &[u8]) -> Result<T, RuntimeError> {
    serde_json::from_slice(b).map_err(|e| RuntimeError::Format(e.to_string()))
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String, RuntimeError> {
    String::from_utf8(read_block(r)?).map_err(|e| RuntimeError::Format(e.to_string()))
}

impl SkillModelBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        self.write_body(&mut w).expect("writing to a Vec cannot fail");
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    fn write_body(&self, w: &mut Vec<u8>) -> Result<(), RuntimeError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(BUNDLE_FORMAT_VERSION)?;
        write_str(w, &self.skill_id)?;
        w.write_u64::<LE>(self.version)?;
        write_str(w, &self.model_digest)?;
        write_str(w, &self.config_digest)?;
        write_str(w, &self.invocation_name)?;
        write_block(w, &serde_json::to_vec(&self.schema).expect("schema serializes"))?;
        write_block(w, &serde_json::to_vec(&self.slot_values).expect("values serialize"))?;
        write_block(w, &self.grammar.to_bytes())?;
        write_block(w, &self.intent_model.to_bytes())?;
        write_block(w, &self.slot_model.to_bytes())?;
        w.write_u32::<LE>(self.gazetteers.len() as u32)?;
        for g in &self.gazetteers {
            write_block(w, &g.to_bytes())?;
        }
        Ok(())
    }

    /// Hex SHA-256 trailer of the serialized form.
    pub fn digest(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - DIGEST_LEN..])
    }

    /// Verifies the trailing digest before decoding anything, so truncated
    /// or corrupted files fail cleanly.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RuntimeError> {
        if bytes.len() < DIGEST_LEN + MAGIC.len() {
            return Err(RuntimeError::DigestMismatch);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(RuntimeError::DigestMismatch);
        }
        let mut r = Cursor::new(body);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RuntimeError::Format("not a skill bundle".into()));
        }
        let v = r.read_u32::<LE>()?;
        if v != BUNDLE_FORMAT_VERSION {
            return Err(RuntimeError::Format(format!("bundle format {v} is not supported")));
        }
        let skill_id = read_str(&mut r)?;
        let version = r.read_u64::<LE>()?;
        let model_digest = read_str(&mut r)?;
        let config_digest = read_str(&mut r)?;
        let invocation_name = read_str(&mut r)?;
        let schema = json(&read_block(&mut r)?)?;
        let slot_values = json(&read_block(&mut r)?)?;
        let grammar = WeightedGrammar::from_bytes(&read_block(&mut r)?)?;
        let intent_model = QuantizedMaxEnt::read(&mut Cursor::new(read_block(&mut r)?))?;
        let slot_model = QuantizedCrf::read(&mut Cursor::new(read_block(&mut r)?))?;
        let n = r.read_u32::<LE>()?;
        let gazetteers = (0..n)
            .map(|_| Ok(BloomFilter::from_bytes(&read_block(&mut r)?)?))
            .collect::<Result<Vec<_>, RuntimeError>>()?;
        if r.position() as usize != body.len() {
            return Err(RuntimeError::Format("trailing bytes after bundle body".into()));
        }
        Ok(SkillModelBundle {
            skill_id,
            version,
            model_digest,
            config_digest,
            schema,
            invocation_name,
            slot_values,
            grammar,
            intent_model,
            slot_model,
            gazetteers,
        })
    }
}
