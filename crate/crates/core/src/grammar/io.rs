//! Binary and text encodings.
//!
//! Binary layout (little-endian): magic `SFST`, format version, prior mode,
//! start state, input and output symbol tables, intent list, then per state
//! the two final weights and its arcs with both weightings.
//!
//! Text layout follows the usual FST printing convention: one arc per line
//! `from to ilabel olabel weight`, one final state per line `state weight`,
//! labels written as symbols. The first arc's source is the start state.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{Arc, GrammarError, OutputSymbol, PriorMode, SymbolTable, WeightSet, WeightedGrammar, EPSILON};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SFST";

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String, GrammarError> {
    let len = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| GrammarError::Format("symbol is not UTF-8".into()))
}

fn write_strings<W: Write>(w: &mut W, items: &[String]) -> std::io::Result<()> {
    w.write_u32::<LE>(items.len() as u32)?;
    items.iter().try_for_each(|s| write_str(w, s))
}

fn read_strings<R: Read>(r: &mut R) -> Result<Vec<String>, GrammarError> {
    let n = r.read_u32::<LE>()?;
    (0..n).map(|_| read_str(r)).collect()
}

impl WeightedGrammar {
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<(), GrammarError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        w.write_u8(match self.prior {
            PriorMode::Empirical => 0,
            PriorMode::MaxEntropy => 1,
        })?;
        w.write_u32::<LE>(self.start)?;
        write_strings(w, &self.input_symbols.symbols)?;
        write_strings(w, &self.output_symbols.symbols)?;
        write_strings(w, &self.intents)?;
        w.write_u32::<LE>(self.num_states() as u32)?;
        for s in 0..self.num_states() {
            w.write_f64::<LE>(self.empirical.finals[s])?;
            w.write_f64::<LE>(self.uniform.finals[s])?;
            let (lo, hi) = (self.offsets[s] as usize, self.offsets[s + 1] as usize);
            w.write_u32::<LE>((hi - lo) as u32)?;
            for i in lo..hi {
                let a = &self.arcs[i];
                w.write_u32::<LE>(a.ilabel)?;
                w.write_u32::<LE>(a.olabel)?;
                w.write_u32::<LE>(a.nextstate)?;
                w.write_f64::<LE>(self.empirical.arcs[i])?;
                w.write_f64::<LE>(self.uniform.arcs[i])?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_binary(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self, GrammarError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(GrammarError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LE>()?;
        if version != FORMAT_VERSION {
            return Err(GrammarError::Format(format!("unsupported format version {version}")));
        }
        let prior = match r.read_u8()? {
            0 => PriorMode::Empirical,
            1 => PriorMode::MaxEntropy,
            m => return Err(GrammarError::Format(format!("unknown prior mode {m}"))),
        };
        let start = r.read_u32::<LE>()?;
        let input_symbols = SymbolTable::from_symbols(read_strings(r)?)?;
        let output_symbols = SymbolTable::from_symbols(read_strings(r)?)?;
        let intents = read_strings(r)?;
        let output_kinds = output_kinds(&output_symbols)?;
        let n = r.read_u32::<LE>()? as usize;
        let mut offsets = vec![0u32];
        let mut arcs = Vec::new();
        let (mut emp, mut uni) = (WeightSet { arcs: vec![], finals: vec![] }, WeightSet { arcs: vec![], finals: vec![] });
        for _ in 0..n {
            emp.finals.push(r.read_f64::<LE>()?);
            uni.finals.push(r.read_f64::<LE>()?);
            let k = r.read_u32::<LE>()?;
            for _ in 0..k {
                let ilabel = r.read_u32::<LE>()?;
                let olabel = r.read_u32::<LE>()?;
                let nextstate = r.read_u32::<LE>()?;
                if ilabel as usize >= input_symbols.len() || olabel as usize >= output_symbols.len() || nextstate as usize >= n {
                    return Err(GrammarError::Format("arc references out-of-range id".into()));
                }
                let (we, wu) = (r.read_f64::<LE>()?, r.read_f64::<LE>()?);
                emp.arcs.push(we);
                uni.arcs.push(wu);
                arcs.push(Arc { ilabel, olabel, weight: we, nextstate });
            }
            offsets.push(arcs.len() as u32);
        }
        if start as usize >= n.max(1) {
            return Err(GrammarError::Format("start state out of range".into()));
        }
        let g = WeightedGrammar {
            input_symbols,
            output_symbols,
            output_kinds,
            start,
            offsets,
            arcs,
            finals: emp.finals.clone(),
            empirical: emp,
            uniform: uni,
            prior: PriorMode::Empirical,
            intents,
            warnings: Vec::new(),
        };
        Ok(g.with_prior(prior))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GrammarError> {
        Self::read_binary(&mut &bytes[..])
    }

    /// Text form under the active weighting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        // the start state's arcs come first so readers can infer it
        let order = std::iter::once(self.start).chain((0..self.num_states() as u32).filter(|&s| s != self.start));
        for s in order {
            for a in self.arcs(s) {
                out.push_str(&format!(
                    "{s}\t{}\t{}\t{}\t{}\n",
                    a.nextstate,
                    self.input_symbols.symbol(a.ilabel),
                    self.output_symbols.symbol(a.olabel),
                    a.weight
                ));
            }
        }
        for s in 0..self.num_states() as u32 {
            if let Some(w) = self.final_weight(s) {
                out.push_str(&format!("{s}\t{w}\n"));
            }
        }
        out
    }

    /// Parses the text form. Both weightings are set to the weights read.
    pub fn from_text(text: &str) -> Result<Self, GrammarError> {
        let bad = |n: usize, msg: &str| GrammarError::Format(format!("line {}: {msg}", n + 1));
        let mut isyms = SymbolTable::new();
        let mut osyms = SymbolTable::new();
        let mut out_arcs: BTreeMap<u32, Vec<Arc>> = BTreeMap::new();
        let mut finals: BTreeMap<u32, f64> = BTreeMap::new();
        let mut start = None;
        let mut max_state = 0u32;
        let mut intents = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let state = |s: &str| s.parse::<u32>().map_err(|_| bad(n, "bad state id"));
            let weight = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad weight"));
            match f.len() {
                0 => continue,
                1 | 2 => {
                    let s = state(f[0])?;
                    finals.insert(s, if f.len() == 2 { weight(f[1])? } else { 0.0 });
                    max_state = max_state.max(s);
                }
                4 | 5 => {
                    let (from, to) = (state(f[0])?, state(f[1])?);
                    start.get_or_insert(from);
                    let olabel = osyms.intern(f[3]);
                    let kind = OutputSymbol::parse(f[3]).ok_or_else(|| bad(n, "unknown output symbol"))?;
                    if let OutputSymbol::Intent(name) = kind {
                        if !intents.contains(&name) {
                            intents.push(name);
                        }
                    }
                    let arc = Arc {
                        ilabel: isyms.intern(f[2]),
                        olabel,
                        weight: if f.len() == 5 { weight(f[4])? } else { 0.0 },
                        nextstate: to,
                    };
                    out_arcs.entry(from).or_default().push(arc);
                    max_state = max_state.max(from).max(to);
                }
                _ => return Err(bad(n, "expected 2 or 5 fields")),
            }
        }
        let n = if start.is_none() && finals.is_empty() { 1 } else { max_state as usize + 1 };
        let mut offsets = vec![0u32];
        let mut arcs = Vec::new();
        let mut fin = vec![f64::INFINITY; n];
        for s in 0..n as u32 {
            let mut v = out_arcs.remove(&s).unwrap_or_default();
            v.sort_by_key(|a| a.ilabel);
            arcs.extend(v);
            offsets.push(arcs.len() as u32);
            if let Some(&w) = finals.get(&s) {
                fin[s as usize] = w;
            }
        }
        let weights: Vec<f64> = arcs.iter().map(|a| a.weight).collect();
        let set = WeightSet { arcs: weights, finals: fin.clone() };
        Ok(WeightedGrammar {
            output_kinds: output_kinds(&osyms)?,
            input_symbols: isyms,
            output_symbols: osyms,
            start: start.unwrap_or(0),
            offsets,
            arcs,
            finals: fin,
            empirical: set.clone(),
            uniform: set,
            prior: PriorMode::Empirical,
            intents,
            warnings: Vec::new(),
        })
    }
}

fn output_kinds(table: &SymbolTable) -> Result<Vec<OutputSymbol>, GrammarError> {
    table
        .iter()
        .map(|(id, s)| {
            let kind = OutputSymbol::parse(s).ok_or_else(|| GrammarError::Format(format!("unknown output symbol {s:?}")))?;
            if (id == EPSILON) != (kind == OutputSymbol::Epsilon) {
                return Err(GrammarError::Format("epsilon must be output id 0".into()));
            }
            Ok(kind)
        })
        .collect()
}
