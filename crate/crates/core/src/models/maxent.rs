use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::weights::{log_sum_exp, read_strings, write_strings, Columns, Regularizer, TrainColumns};
use super::{ModelError, TrainConfig, TrainReport};
use crate::features::{apply_knowledge_dropout, Encoder, FeatureHasher, FeatureVector};

const MAGIC: &[u8; 4] = b"SFME";
const VERSION: u32 = 1;

/// Multinomial logistic regression over sparse features. There is no
/// separate bias term; extracted feature sets carry a constant `bias` feature.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxEntModel {
    pub labels: Vec<String>,
    pub encoder: Encoder,
    pub weights: Columns,
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(scores);
    scores.iter().map(|s| (s - z).exp()).collect()
}

impl MaxEntModel {
    pub fn new(labels: Vec<String>, encoder: Encoder) -> Self {
        let width = labels.len();
        MaxEntModel { labels, encoder, weights: Columns::new(width) }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn check(&self, fv: &FeatureVector) -> Result<(), ModelError> {
        if fv.dim != self.dim() {
            return Err(ModelError::DimensionMismatch { expected: self.dim(), got: fv.dim });
        }
        Ok(())
    }

    /// Posterior over `labels` (softmax of `w·x`).
    pub fn predict(&self, fv: &FeatureVector) -> Result<Vec<f64>, ModelError> {
        self.check(fv)?;
        Ok(softmax(&self.weights.scores(fv)))
    }

    pub fn predict_names<S: AsRef<str>>(&self, features: &[S]) -> Vec<f64> {
        softmax(&self.weights.scores(&self.encoder.encode(features)))
    }

    /// Best label and its probability; ties go to the lower index.
    pub fn classify(&self, fv: &FeatureVector) -> Result<(usize, f64), ModelError> {
        let p = self.predict(fv)?;
        Ok(argmax(&p))
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// `mean NLL + l2 ||w||^2 + l1 ||w||_1` over `(vector, label index)` pairs.
    pub fn objective(&self, data: &[(FeatureVector, usize)], l1: f64, l2: f64) -> f64 {
        let nll: f64 = data
            .iter()
            .map(|(x, y)| {
                let s = self.weights.scores(x);
                log_sum_exp(&s) - s[*y]
            })
            .sum::<f64>();
        nll / data.len().max(1) as f64 + l2 * self.weights.l2_sq() + l1 * self.weights.l1_norm()
    }

    /// Gradient of the smooth part of [`Self::objective`] (mean NLL plus the
    /// L2 term) with respect to `w[feature][label]`.
    pub fn objective_grad(&self, data: &[(FeatureVector, usize)], l2: f64, feature: u32, label: usize) -> f64 {
        let mut g = 0.0;
        for (x, y) in data {
            let v = x.get(feature);
            if v == 0.0 {
                continue;
            }
            let p = softmax(&self.weights.scores(x));
            g += v * (p[label] - if *y == label { 1.0 } else { 0.0 });
        }
        g / data.len().max(1) as f64 + 2.0 * l2 * self.weights.get(feature, label)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
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
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC || r.read_u32::<LE>()? != VERSION {
            return Err(ModelError::Format("not a maxent model".into()));
        }
        let labels = read_strings(r)?;
        let encoder = Encoder::read(r)?;
        let weights = Columns::read(r)?;
        if weights.width != labels.len() {
            return Err(ModelError::Format("weight width does not match label count".into()));
        }
        Ok(MaxEntModel { labels, encoder, weights })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::read(&mut &bytes[..])
    }
}

pub(crate) fn argmax(p: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    (best, p[best])
}

/// Resolves the label table: `labels` if given (every label must have an
/// example), otherwise sorted distinct labels of the data.
fn label_table<'a>(given: &[String], gold: impl Iterator<Item = &'a str> + Clone) -> Result<Vec<String>, ModelError> {
    let labels: Vec<String> = if given.is_empty() {
        let mut l: Vec<String> = gold.clone().map(str::to_string).collect();
        l.sort();
        l.dedup();
        l
    } else {
        given.to_vec()
    };
    for g in gold.clone() {
        if !labels.iter().any(|l| l == g) {
            return Err(ModelError::UnknownLabel(g.to_string()));
        }
    }
    for l in &labels {
        if !gold.clone().any(|g| g == l) {
            return Err(ModelError::LabelWithoutExamples(l.clone()));
        }
    }
    Ok(labels)
}

/// Trains on pre-encoded vectors (no knowledge dropout). `labels` fixes the
/// label order; pass an empty slice to use the sorted distinct gold labels.
pub fn train_maxent(
    dataset: &[(FeatureVector, String)],
    labels: &[String],
    encoder: Encoder,
    config: &TrainConfig,
) -> Result<(MaxEntModel, TrainReport), ModelError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if let Some((x, _)) = dataset.iter().find(|(x, _)| x.dim != encoder.dim()) {
        return Err(ModelError::DimensionMismatch { expected: encoder.dim(), got: x.dim });
    }
    let labels = label_table(labels, dataset.iter().map(|(_, l)| l.as_str()))?;
    let data: Vec<(FeatureVector, usize)> =
        dataset.iter().map(|(x, l)| (x.clone(), labels.iter().position(|k| k == l).unwrap())).collect();
    fit(labels, encoder, &data, config, |i, _| data[i].0.clone())
}

/// Trains on named features; knowledge dropout is re-drawn per example per
/// epoch before encoding.
pub fn train_maxent_named(
    dataset: &[(Vec<String>, String)],
    labels: &[String],
    encoder: Option<Encoder>,
    config: &TrainConfig,
) -> Result<(MaxEntModel, TrainReport), ModelError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let encoder = match encoder {
        Some(e) => e,
        None => Encoder::Hashed(FeatureHasher::new(config.hash_bits, config.hash_seed)?),
    };
    let labels = label_table(labels, dataset.iter().map(|(_, l)| l.as_str()))?;
    let data: Vec<(FeatureVector, usize)> = dataset
        .iter()
        .map(|(f, l)| (encoder.encode(f), labels.iter().position(|k| k == l).unwrap()))
        .collect();
    let enc = encoder.clone();
    let rate = config.dropout;
    fit(labels, encoder, &data, config, |i, rng| {
        if rate == 0.0 {
            return data[i].0.clone();
        }
        let kept = apply_knowledge_dropout(dataset[i].0.clone(), rate, rng).expect("rate validated");
        enc.encode(&kept)
    })
}

fn fit(
    labels: Vec<String>,
    encoder: Encoder,
    data: &[(FeatureVector, usize)],
    config: &TrainConfig,
    mut features: impl FnMut(usize, &mut ChaCha8Rng) -> FeatureVector,
) -> Result<(MaxEntModel, TrainReport), ModelError> {
    let width = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut reg = Regularizer::new(config, data.len());
    let mut cols = TrainColumns::new(width);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let mut model = MaxEntModel::new(labels, encoder);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            reg.step();
            let x = features(i, &mut rng);
            let p = softmax(&cols.scores(&x, &reg));
            let y = data[i].1;
            let eta = reg.eta;
            for &(f, v) in &x.entries {
                let col = cols.touch(f, &reg);
                for (l, w) in col.w.iter_mut().enumerate() {
                    let g = v * ((l == y) as u8 as f64 - p[l]);
                    *w += eta * g;
                }
                col.sync(&reg);
            }
        }
        model.weights = cols.finish(&reg);
        report.objective.push(model.objective(data, config.l1, config.l2));
    }
    model.weights = cols.finish(&reg);
    Ok((model, report))
}
