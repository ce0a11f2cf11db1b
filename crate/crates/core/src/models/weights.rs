use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{ModelError, TrainConfig};
use crate::features::FeatureVector;

/// Sparse weight matrix stored by feature column: `cols[f][label]`.
/// Columns never touched during training are implicitly zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Columns {
    pub(crate) width: usize,
    pub(crate) cols: HashMap<u32, Vec<f64>>,
}

impl Columns {
    pub fn new(width: usize) -> Self {
        Columns { width, cols: HashMap::new() }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, feature: u32, label: usize) -> f64 {
        self.cols.get(&feature).map_or(0.0, |c| c[label])
    }

    pub fn set(&mut self, feature: u32, label: usize, value: f64) {
        let width = self.width;
        self.cols.entry(feature).or_insert_with(|| vec![0.0; width])[label] = value;
    }

    /// `scores[l] = sum_f x_f * w[f][l]`
    pub fn scores(&self, x: &FeatureVector) -> Vec<f64> {
        let mut s = vec![0.0; self.width];
        for &(f, v) in &x.entries {
            if let Some(col) = self.cols.get(&f) {
                for (acc, w) in s.iter_mut().zip(col) {
                    *acc += v * w;
                }
            }
        }
        s
    }

    pub fn sorted_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.cols.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn nonzero(&self) -> usize {
        self.cols.values().flatten().filter(|w| **w != 0.0).count()
    }

    pub fn l1_norm(&self) -> f64 {
        self.cols.values().flatten().map(|w| w.abs()).sum()
    }

    pub fn l2_sq(&self) -> f64 {
        self.cols.values().flatten().map(|w| w * w).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.cols.values().flatten().all(|w| w.is_finite())
    }

    pub(crate) fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_u32::<LE>(self.width as u32)?;
        let ids = self.sorted_ids();
        w.write_u32::<LE>(ids.len() as u32)?;
        let mut prev = 0u32;
        for id in ids {
            leb128::write::unsigned(w, (id - prev) as u64)?;
            prev = id;
            for v in &self.cols[&id] {
                w.write_f64::<LE>(*v)?;
            }
        }
        Ok(())
    }

    pub(crate) fn read<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let width = r.read_u32::<LE>()? as usize;
        let n = r.read_u32::<LE>()?;
        let mut cols = HashMap::with_capacity(n as usize);
        let mut id = 0u32;
        for _ in 0..n {
            id += read_varint(r)?;
            let col = (0..width).map(|_| r.read_f64::<LE>()).collect::<Result<Vec<_>, _>>()?;
            cols.insert(id, col);
        }
        Ok(Columns { width, cols })
    }
}

pub(crate) fn read_varint<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let v = leb128::read::unsigned(r).map_err(|e| match e {
        leb128::read::Error::IoError(e) => ModelError::Io(e),
        leb128::read::Error::Overflow => ModelError::Format("varint overflow".into()),
    })?;
    u32::try_from(v).map_err(|_| ModelError::Format("feature id out of range".into()))
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> Result<String, ModelError> {
    let len = r.read_u32::<LE>()? as usize;
    if len > 1 << 20 {
        return Err(ModelError::Format("string too long".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ModelError::Format("string is not UTF-8".into()))
}

pub(crate) fn write_strings<W: Write>(w: &mut W, items: &[String]) -> std::io::Result<()> {
    w.write_u32::<LE>(items.len() as u32)?;
    items.iter().try_for_each(|s| write_str(w, s))
}

pub(crate) fn read_strings<R: Read>(r: &mut R) -> Result<Vec<String>, ModelError> {
    let n = r.read_u32::<LE>()?;
    (0..n).map(|_| read_str(r)).collect()
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Weight vector under lazy elastic-net updates. L2 shrinkage is tracked as
/// a global log scale and L1 with the cumulative-penalty rule (clip towards
/// zero by the penalty accrued since the last touch), so only the columns an
/// example touches are updated. Non-finite entries are structural and left alone.
#[derive(Debug, Clone)]
pub(crate) struct LazyVec {
    pub w: Vec<f64>,
    q: Vec<f64>,
    seen_log_scale: f64,
}

impl LazyVec {
    pub fn new(w: Vec<f64>, reg: &Regularizer) -> Self {
        let n = w.len();
        LazyVec { w, q: vec![0.0; n], seen_log_scale: reg.log_scale }
    }

    /// Brings the vector up to the regularizer's current state.
    pub fn sync(&mut self, reg: &Regularizer) {
        if reg.log_scale != self.seen_log_scale {
            let f = (reg.log_scale - self.seen_log_scale).exp();
            for w in self.w.iter_mut().filter(|w| w.is_finite()) {
                *w *= f;
            }
            self.seen_log_scale = reg.log_scale;
        }
        if reg.u > 0.0 {
            for (w, q) in self.w.iter_mut().zip(self.q.iter_mut()) {
                if !w.is_finite() {
                    continue;
                }
                let z = *w;
                if z > 0.0 {
                    *w = (z - (reg.u + *q)).max(0.0);
                } else if z < 0.0 {
                    *w = (z + (reg.u - *q)).min(0.0);
                }
                *q += *w - z;
            }
        }
    }
}

/// Learning-rate schedule and cumulative regularization state.
#[derive(Debug, Clone)]
pub(crate) struct Regularizer {
    eta0: f64,
    decay_steps: f64,
    l1: f64,
    l2: f64,
    t: u64,
    log_scale: f64,
    u: f64,
    pub eta: f64,
}

impl Regularizer {
    pub fn new(config: &TrainConfig, n: usize) -> Self {
        let decay_steps = if config.decay_steps == 0 { n.max(1) } else { config.decay_steps } as f64;
        Regularizer { eta0: config.eta0, decay_steps, l1: config.l1, l2: config.l2, t: 0, log_scale: 0.0, u: 0.0, eta: config.eta0 }
    }

    /// Advances one example: sets the step size and accrues this step's
    /// shrinkage (gradient of `l2 * w^2`) and L1 penalty.
    pub fn step(&mut self) {
        self.eta = self.eta0 / (1.0 + self.t as f64 / self.decay_steps);
        self.t += 1;
        let shrink = (1.0 - 2.0 * self.eta * self.l2).max(1e-12);
        self.log_scale += shrink.ln();
        self.u += self.eta * self.l1;
    }
}

/// Column store under training; flattened into [`Columns`] at the end.
pub(crate) struct TrainColumns {
    width: usize,
    cols: HashMap<u32, LazyVec>,
}

impl TrainColumns {
    pub fn new(width: usize) -> Self {
        TrainColumns { width, cols: HashMap::new() }
    }

    /// Synced column for `f`, created at zero on first touch.
    pub fn touch(&mut self, f: u32, reg: &Regularizer) -> &mut LazyVec {
        let width = self.width;
        let col = self.cols.entry(f).or_insert_with(|| LazyVec::new(vec![0.0; width], reg));
        col.sync(reg);
        col
    }

    pub fn scores(&mut self, x: &FeatureVector, reg: &Regularizer) -> Vec<f64> {
        let mut s = vec![0.0; self.width];
        for &(f, v) in &x.entries {
            let col = self.touch(f, reg);
            for (acc, w) in s.iter_mut().zip(&col.w) {
                *acc += v * w;
            }
        }
        s
    }

    /// Snapshot with all pending regularization applied; all-zero columns dropped.
    pub fn finish(&mut self, reg: &Regularizer) -> Columns {
        let mut out = Columns::new(self.width);
        for (&f, col) in self.cols.iter_mut() {
            col.sync(reg);
            if col.w.iter().any(|w| *w != 0.0) {
                out.cols.insert(f, col.w.clone());
            }
        }
        out
    }
}
