//! Symmetric 8-bit quantization with one scale per weight-matrix row
//! (`scale = max|w| / 127`). `-inf` entries are kept out of band.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::weights::{read_strings, read_varint, write_strings, Columns};
use super::{CrfModel, MaxEntModel, ModelError};
use crate::features::Encoder;

const MAGIC_ME: &[u8; 4] = b"SFQM";
const MAGIC_CRF: &[u8; 4] = b"SFQC";
const VERSION: u32 = 1;

fn scale_for<'a>(row: impl Iterator<Item = &'a f64>) -> f64 {
    row.filter(|w| w.is_finite()).fold(0.0, |m: f64, w| m.max(w.abs())) / 127.0
}

fn q8(w: f64, scale: f64) -> i8 {
    if scale == 0.0 {
        0
    } else {
        (w / scale).round().clamp(-127.0, 127.0) as i8
    }
}

/// One dense row: scale, codes and the positions of `-inf` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRow {
    pub scale: f64,
    pub codes: Vec<i8>,
    pub neg_inf: Vec<u32>,
}

pub fn quantize_row(row: &[f64]) -> QuantizedRow {
    let scale = scale_for(row.iter());
    let neg_inf = row.iter().enumerate().filter(|(_, w)| **w == f64::NEG_INFINITY).map(|(i, _)| i as u32).collect();
    let codes = row.iter().map(|&w| if w.is_finite() { q8(w, scale) } else { 0 }).collect();
    QuantizedRow { scale, codes, neg_inf }
}

impl QuantizedRow {
    pub fn dequantize(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.codes.iter().map(|&c| c as f64 * self.scale).collect();
        for &i in &self.neg_inf {
            out[i as usize] = f64::NEG_INFINITY;
        }
        out
    }

    fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_f64::<LE>(self.scale)?;
        w.write_u32::<LE>(self.codes.len() as u32)?;
        for c in &self.codes {
            w.write_i8(*c)?;
        }
        w.write_u32::<LE>(self.neg_inf.len() as u32)?;
        for i in &self.neg_inf {
            leb128::write::unsigned(w, *i as u64)?;
        }
        Ok(())
    }

    fn read<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let scale = r.read_f64::<LE>()?;
        let n = r.read_u32::<LE>()? as usize;
        let codes = (0..n).map(|_| r.read_i8()).collect::<Result<_, _>>()?;
        let k = r.read_u32::<LE>()?;
        let neg_inf: Vec<u32> = (0..k).map(|_| read_varint(r)).collect::<Result<_, _>>()?;
        if neg_inf.iter().any(|&i| i as usize >= n) {
            return Err(ModelError::Format("sentinel index out of range".into()));
        }
        Ok(QuantizedRow { scale, codes, neg_inf })
    }
}

/// Sparse column store with one scale per label row. Columns whose codes
/// are all zero are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedColumns {
    width: usize,
    scales: Vec<f64>,
    ids: Vec<u32>,
    codes: Vec<i8>,
}

impl QuantizedColumns {
    fn new(cols: &Columns) -> Self {
        let width = cols.width;
        let mut scales = vec![0.0f64; width];
        for col in cols.cols.values() {
            for (s, w) in scales.iter_mut().zip(col) {
                *s = s.max(w.abs());
            }
        }
        for s in &mut scales {
            *s /= 127.0;
        }
        let mut ids = Vec::new();
        let mut codes = Vec::new();
        for id in cols.sorted_ids() {
            let q: Vec<i8> = cols.cols[&id].iter().zip(&scales).map(|(&w, &s)| q8(w, s)).collect();
            if q.iter().any(|c| *c != 0) {
                ids.push(id);
                codes.extend(q);
            }
        }
        QuantizedColumns { width, scales, ids, codes }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    fn dequantize(&self) -> Columns {
        let mut out = Columns::new(self.width);
        for (k, id) in self.ids.iter().enumerate() {
            let col = self.codes[k * self.width..(k + 1) * self.width].iter().zip(&self.scales).map(|(&c, &s)| c as f64 * s).collect();
            out.cols.insert(*id, col);
        }
        out
    }

    fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_u32::<LE>(self.width as u32)?;
        for s in &self.scales {
            w.write_f64::<LE>(*s)?;
        }
        w.write_u32::<LE>(self.ids.len() as u32)?;
        let mut prev = 0;
        for (k, id) in self.ids.iter().enumerate() {
            leb128::write::unsigned(w, (id - prev) as u64)?;
            prev = *id;
            for c in &self.codes[k * self.width..(k + 1) * self.width] {
                w.write_i8(*c)?;
            }
        }
        Ok(())
    }

    fn read<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let width = r.read_u32::<LE>()? as usize;
        let scales = (0..width).map(|_| r.read_f64::<LE>()).collect::<Result<_, _>>()?;
        let n = r.read_u32::<LE>()? as usize;
        let mut ids = Vec::with_capacity(n);
        let mut codes = Vec::with_capacity(n * width);
        let mut id = 0;
        for _ in 0..n {
            id += read_varint(r)?;
            ids.push(id);
            for _ in 0..width {
                codes.push(r.read_i8()?);
            }
        }
        Ok(QuantizedColumns { width, scales, ids, codes })
    }
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<(), ModelError> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic || r.read_u32::<LE>()? != VERSION {
        return Err(ModelError::Format("unexpected quantized model header".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMaxEnt {
    pub labels: Vec<String>,
    pub encoder: Encoder,
    pub weights: QuantizedColumns,
}

impl QuantizedMaxEnt {
    pub fn new(model: &MaxEntModel) -> Self {
        QuantizedMaxEnt { labels: model.labels.clone(), encoder: model.encoder.clone(), weights: QuantizedColumns::new(&model.weights) }
    }

    pub fn dequantize(&self) -> MaxEntModel {
        MaxEntModel { labels: self.labels.clone(), encoder: self.encoder.clone(), weights: self.weights.dequantize() }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        w.write_all(MAGIC_ME)?;
        w.write_u32::<LE>(VERSION)?;
        write_strings(w, &self.labels)?;
        self.encoder.write(w)?;
        self.weights.write(w)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        check_magic(r, MAGIC_ME)?;
        let labels = read_strings(r)?;
        let encoder = Encoder::read(r)?;
        let weights = QuantizedColumns::read(r)?;
        if weights.width != labels.len() {
            return Err(ModelError::Format("weight width does not match label count".into()));
        }
        Ok(QuantizedMaxEnt { labels, encoder, weights })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCrf {
    pub labels: Vec<String>,
    pub encoder: Encoder,
    pub emissions: QuantizedColumns,
    pub transitions: Vec<QuantizedRow>,
    pub start: QuantizedRow,
}

impl QuantizedCrf {
    pub fn new(model: &CrfModel) -> Self {
        let l = model.num_labels();
        QuantizedCrf {
            labels: model.labels.clone(),
            encoder: model.encoder.clone(),
            emissions: QuantizedColumns::new(&model.emissions),
            transitions: model.transitions.chunks(l.max(1)).map(quantize_row).collect(),
            start: quantize_row(&model.start),
        }
    }

    pub fn dequantize(&self) -> CrfModel {
        CrfModel {
            labels: self.labels.clone(),
            encoder: self.encoder.clone(),
            emissions: self.emissions.dequantize(),
            transitions: self.transitions.iter().flat_map(QuantizedRow::dequantize).collect(),
            start: self.start.dequantize(),
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        w.write_all(MAGIC_CRF)?;
        w.write_u32::<LE>(VERSION)?;
        write_strings(w, &self.labels)?;
        self.encoder.write(w)?;
        for row in &self.transitions {
            row.write(w)?;
        }
        self.start.write(w)?;
        self.emissions.write(w)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        check_magic(r, MAGIC_CRF)?;
        let labels = read_strings(r)?;
        let encoder = Encoder::read(r)?;
        let l = labels.len();
        let transitions = (0..l).map(|_| QuantizedRow::read(r)).collect::<Result<Vec<_>, _>>()?;
        let start = QuantizedRow::read(r)?;
        let emissions = QuantizedColumns::read(r)?;
        if emissions.width != l || start.codes.len() != l || transitions.iter().any(|t| t.codes.len() != l) {
            return Err(ModelError::Format("quantized CRF shape mismatch".into()));
        }
        Ok(QuantizedCrf { labels, encoder, emissions, transitions, start })
    }
}
