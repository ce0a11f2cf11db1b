use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::frame::bio_labels;
use super::weights::{log_sum_exp, read_strings, write_strings, Columns, LazyVec, Regularizer, TrainColumns};
use super::{ModelError, TrainConfig, TrainReport};
use crate::features::{apply_knowledge_dropout, Encoder, FeatureHasher, FeatureVector};

const MAGIC: &[u8; 4] = b"SFCR";
const VERSION: u32 = 1;
const NEG_INF: f64 = f64::NEG_INFINITY;

/// Linear-chain CRF over BIO labels (`O` is index 0). Structurally illegal
/// transitions (`I-x` after anything but `B-x`/`I-x`, or at the start) hold
/// `-inf` and are never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfModel {
    pub labels: Vec<String>,
    pub encoder: Encoder,
    pub emissions: Columns,
    /// Row-major `transitions[prev * L + next]`.
    pub transitions: Vec<f64>,
    pub start: Vec<f64>,
}

/// One training sequence: named features per token and gold BIO labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSequence {
    pub features: Vec<Vec<String>>,
    pub labels: Vec<String>,
}

/// Gradient of the log-likelihood, shaped like the model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CrfGradient {
    pub emissions: HashMap<u32, Vec<f64>>,
    pub transitions: Vec<f64>,
    pub start: Vec<f64>,
}

fn inside_of(label: &str) -> Option<&str> {
    label.strip_prefix("I-")
}

fn legal(prev: Option<&str>, next: &str) -> bool {
    match inside_of(next) {
        None => true,
        Some(slot) => prev.is_some_and(|p| p.strip_prefix("B-") == Some(slot) || p.strip_prefix("I-") == Some(slot)),
    }
}

impl CrfModel {
    /// Zero-weight model over the BIO labels of `slots`.
    pub fn new(slots: &[String], encoder: Encoder) -> Self {
        let labels = bio_labels(slots);
        let l = labels.len();
        let mut transitions = vec![0.0; l * l];
        let mut start = vec![0.0; l];
        for (b, next) in labels.iter().enumerate() {
            if !legal(None, next) {
                start[b] = NEG_INF;
            }
            for (a, prev) in labels.iter().enumerate() {
                if !legal(Some(prev), next) {
                    transitions[a * l + b] = NEG_INF;
                }
            }
        }
        CrfModel { emissions: Columns::new(l), labels, encoder, transitions, start }
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn transition(&self, prev: usize, next: usize) -> f64 {
        self.transitions[prev * self.num_labels() + next]
    }

    pub fn is_allowed(&self, prev: Option<usize>, next: usize) -> bool {
        match prev {
            None => self.start[next] > NEG_INF,
            Some(p) => self.transition(p, next) > NEG_INF,
        }
    }

    pub fn encode_sequence(&self, features: &[Vec<String>]) -> Vec<FeatureVector> {
        features.iter().map(|f| self.encoder.encode(f)).collect()
    }

    fn emission_scores(&self, xs: &[FeatureVector]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| self.emissions.scores(x)).collect()
    }

    /// Unnormalized score of a label sequence.
    pub fn score(&self, xs: &[FeatureVector], ys: &[usize]) -> f64 {
        let e = self.emission_scores(xs);
        sequence_score(&e, &self.transitions, &self.start, ys)
    }

    /// `log Z(x)` by the forward algorithm.
    pub fn log_partition(&self, xs: &[FeatureVector]) -> f64 {
        let e = self.emission_scores(xs);
        let alpha = forward(&e, &self.transitions, &self.start);
        log_sum_exp(alpha.last().map(Vec::as_slice).unwrap_or(&[]))
    }

    /// Per-position label marginals from forward-backward.
    pub fn marginals(&self, xs: &[FeatureVector]) -> Vec<Vec<f64>> {
        let e = self.emission_scores(xs);
        let alpha = forward(&e, &self.transitions, &self.start);
        let beta = backward(&e, &self.transitions);
        let z = log_sum_exp(alpha.last().map(Vec::as_slice).unwrap_or(&[]));
        alpha.iter().zip(&beta).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y - z).exp()).collect()).collect()
    }

    /// Highest-scoring label sequence and its score. Ties go to the lowest
    /// label index at every backpointer.
    pub fn viterbi(&self, xs: &[FeatureVector]) -> (Vec<usize>, f64) {
        self.viterbi_masked(xs, &vec![true; self.num_labels()])
    }

    /// Viterbi restricted to labels with `allowed[l]` (`O` is always allowed).
    pub fn viterbi_masked(&self, xs: &[FeatureVector], allowed: &[bool]) -> (Vec<usize>, f64) {
        if xs.is_empty() {
            return (Vec::new(), 0.0);
        }
        let l = self.num_labels();
        let mut e = self.emission_scores(xs);
        for row in &mut e {
            for (k, v) in row.iter_mut().enumerate() {
                if k != 0 && !allowed[k] {
                    *v = NEG_INF;
                }
            }
        }
        let mut delta: Vec<f64> = (0..l).map(|k| self.start[k] + e[0][k]).collect();
        let mut back: Vec<Vec<usize>> = Vec::with_capacity(xs.len());
        for row in e.iter().skip(1) {
            let mut next = vec![NEG_INF; l];
            let mut bp = vec![0usize; l];
            for b in 0..l {
                let mut best = NEG_INF;
                let mut arg = 0;
                for (a, d) in delta.iter().enumerate() {
                    let s = d + self.transitions[a * l + b];
                    if s > best {
                        best = s;
                        arg = a;
                    }
                }
                next[b] = best + row[b];
                bp[b] = arg;
            }
            back.push(bp);
            delta = next;
        }
        let mut last = 0;
        for k in 1..l {
            if delta[k] > delta[last] {
                last = k;
            }
        }
        let score = delta[last];
        let mut path = vec![last];
        for bp in back.iter().rev() {
            last = bp[last];
            path.push(last);
        }
        path.reverse();
        (path, score)
    }

    /// Tags named-feature sequences, returning label strings.
    pub fn tag(&self, features: &[Vec<String>]) -> Vec<String> {
        let (path, _) = self.viterbi(&self.encode_sequence(features));
        path.into_iter().map(|i| self.labels[i].clone()).collect()
    }

    pub fn gold_indices(&self, labels: &[String]) -> Result<Vec<usize>, ModelError> {
        let mut out = Vec::with_capacity(labels.len());
        for (t, lab) in labels.iter().enumerate() {
            let i = self.label_index(lab).ok_or_else(|| ModelError::UnknownLabel(lab.clone()))?;
            let prev = t.checked_sub(1).map(|p| out[p]);
            if !self.is_allowed(prev, i) {
                return Err(ModelError::IllegalSequence {
                    position: t,
                    previous: prev.map_or("<start>".to_string(), |p| self.labels[p].clone()),
                    label: lab.clone(),
                });
            }
            out.push(i);
        }
        Ok(out)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        write_strings(w, &self.labels)?;
        self.encoder.write(w)?;
        for v in self.transitions.iter().chain(&self.start) {
            w.write_f64::<LE>(*v)?;
        }
        self.emissions.write(w)?;
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
            return Err(ModelError::Format("not a CRF model".into()));
        }
        let labels = read_strings(r)?;
        let encoder = Encoder::read(r)?;
        let l = labels.len();
        let transitions = (0..l * l).map(|_| r.read_f64::<LE>()).collect::<Result<_, _>>()?;
        let start = (0..l).map(|_| r.read_f64::<LE>()).collect::<Result<_, _>>()?;
        let emissions = Columns::read(r)?;
        if emissions.width != l {
            return Err(ModelError::Format("emission width does not match label count".into()));
        }
        Ok(CrfModel { labels, encoder, emissions, transitions, start })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::read(&mut &bytes[..])
    }
}

fn sequence_score(e: &[Vec<f64>], trans: &[f64], start: &[f64], ys: &[usize]) -> f64 {
    let l = start.len();
    let mut s = start[ys[0]] + e[0][ys[0]];
    for t in 1..ys.len() {
        s += trans[ys[t - 1] * l + ys[t]] + e[t][ys[t]];
    }
    s
}

fn forward(e: &[Vec<f64>], trans: &[f64], start: &[f64]) -> Vec<Vec<f64>> {
    let l = start.len();
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(e.len());
    if e.is_empty() {
        return alpha;
    }
    alpha.push((0..l).map(|k| start[k] + e[0][k]).collect());
    let mut buf = vec![0.0; l];
    for row in e.iter().skip(1) {
        let prev = alpha.last().unwrap();
        let cur = (0..l)
            .map(|b| {
                for a in 0..l {
                    buf[a] = prev[a] + trans[a * l + b];
                }
                log_sum_exp(&buf) + row[b]
            })
            .collect();
        alpha.push(cur);
    }
    alpha
}

fn backward(e: &[Vec<f64>], trans: &[f64]) -> Vec<Vec<f64>> {
    let n = e.len();
    if n == 0 {
        return Vec::new();
    }
    let l = e[0].len();
    let mut beta = vec![vec![0.0; l]; n];
    let mut buf = vec![0.0; l];
    for t in (0..n - 1).rev() {
        for a in 0..l {
            for b in 0..l {
                buf[b] = trans[a * l + b] + e[t + 1][b] + beta[t + 1][b];
            }
            beta[t][a] = log_sum_exp(&buf);
        }
    }
    beta
}

/// Log-likelihood `score(x, y) - log Z(x)` and its gradient (observed minus
/// expected feature counts).
pub fn crf_loglik_grad(model: &CrfModel, xs: &[FeatureVector], ys: &[usize]) -> Result<(f64, CrfGradient), ModelError> {
    if xs.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if xs.len() != ys.len() {
        return Err(ModelError::LengthMismatch { features: xs.len(), labels: ys.len() });
    }
    let names: Vec<String> = ys.iter().map(|&y| model.labels.get(y).cloned().unwrap_or_default()).collect();
    model.gold_indices(&names)?;
    let e = model.emission_scores(xs);
    let mut g = CrfGradient {
        emissions: HashMap::new(),
        transitions: vec![0.0; model.transitions.len()],
        start: vec![0.0; model.start.len()],
    };
    let ll = accumulate(&e, &model.transitions, &model.start, xs, ys, &mut g);
    Ok((ll, g))
}

/// Adds the log-likelihood gradient for one sequence to `g`; returns the
/// log-likelihood.
fn accumulate(e: &[Vec<f64>], trans: &[f64], start: &[f64], xs: &[FeatureVector], ys: &[usize], g: &mut CrfGradient) -> f64 {
    let l = start.len();
    let alpha = forward(e, trans, start);
    let beta = backward(e, trans);
    let z = log_sum_exp(alpha.last().unwrap());
    for (t, x) in xs.iter().enumerate() {
        let marg: Vec<f64> = (0..l).map(|k| (alpha[t][k] + beta[t][k] - z).exp()).collect();
        for &(f, v) in &x.entries {
            let col = g.emissions.entry(f).or_insert_with(|| vec![0.0; l]);
            for k in 0..l {
                col[k] += v * ((ys[t] == k) as u8 as f64 - marg[k]);
            }
        }
        if t == 0 {
            for k in 0..l {
                g.start[k] += (ys[0] == k) as u8 as f64 - marg[k];
            }
        } else {
            g.transitions[ys[t - 1] * l + ys[t]] += 1.0;
            for a in 0..l {
                if alpha[t - 1][a] == NEG_INF {
                    continue;
                }
                for b in 0..l {
                    let tr = trans[a * l + b];
                    if tr == NEG_INF {
                        continue;
                    }
                    g.transitions[a * l + b] -= (alpha[t - 1][a] + tr + e[t][b] + beta[t][b] - z).exp();
                }
            }
        }
    }
    sequence_score(e, trans, start, ys) - z
}

/// Trains a CRF for the given slots. Knowledge dropout is re-drawn for every
/// sequence in every epoch; `-inf` transitions stay pinned.
pub fn train_crf(
    dataset: &[TaggedSequence],
    slots: &[String],
    encoder: Option<Encoder>,
    config: &TrainConfig,
) -> Result<(CrfModel, TrainReport), ModelError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let encoder = match encoder {
        Some(e) => e,
        None => Encoder::Hashed(FeatureHasher::new(config.hash_bits, config.hash_seed)?),
    };
    let mut model = CrfModel::new(slots, encoder);
    let mut gold = Vec::with_capacity(dataset.len());
    for seq in dataset {
        if seq.features.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if seq.features.len() != seq.labels.len() {
            return Err(ModelError::LengthMismatch { features: seq.features.len(), labels: seq.labels.len() });
        }
        gold.push(model.gold_indices(&seq.labels)?);
    }
    let encoded: Vec<Vec<FeatureVector>> = dataset.iter().map(|s| model.encode_sequence(&s.features)).collect();

    let l = model.num_labels();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut reg = Regularizer::new(config, dataset.len());
    let mut cols = TrainColumns::new(l);
    let mut trans = LazyVec::new(model.transitions.clone(), &reg);
    let mut start = LazyVec::new(model.start.clone(), &reg);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport::default();

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            reg.step();
            let xs: Vec<FeatureVector> = if config.dropout > 0.0 {
                dataset[i]
                    .features
                    .iter()
                    .map(|f| {
                        let kept = apply_knowledge_dropout(f.clone(), config.dropout, &mut rng).expect("rate validated");
                        model.encoder.encode(&kept)
                    })
                    .collect()
            } else {
                encoded[i].clone()
            };
            trans.sync(&reg);
            start.sync(&reg);
            let e: Vec<Vec<f64>> = xs.iter().map(|x| cols.scores(x, &reg)).collect();
            let mut g = CrfGradient { emissions: HashMap::new(), transitions: vec![0.0; l * l], start: vec![0.0; l] };
            accumulate(&e, &trans.w, &start.w, &xs, &gold[i], &mut g);
            let eta = reg.eta;
            for (f, grad) in g.emissions {
                let col = cols.touch(f, &reg);
                for (w, d) in col.w.iter_mut().zip(grad) {
                    *w += eta * d;
                }
                col.sync(&reg);
            }
            for (w, d) in trans.w.iter_mut().zip(&g.transitions).chain(start.w.iter_mut().zip(&g.start)) {
                if w.is_finite() {
                    *w += eta * d;
                }
            }
            trans.sync(&reg);
            start.sync(&reg);
        }
        snapshot(&mut model, &mut cols, &mut trans, &mut start, &reg);
        report.objective.push(crf_objective(&model, &encoded, &gold, config.l1, config.l2));
    }
    snapshot(&mut model, &mut cols, &mut trans, &mut start, &reg);
    Ok((model, report))
}

fn snapshot(model: &mut CrfModel, cols: &mut TrainColumns, trans: &mut LazyVec, start: &mut LazyVec, reg: &Regularizer) {
    trans.sync(reg);
    start.sync(reg);
    model.emissions = cols.finish(reg);
    model.transitions.clone_from(&trans.w);
    model.start.clone_from(&start.w);
}

/// Mean negative log-likelihood plus elastic net over finite weights.
pub(crate) fn crf_objective(model: &CrfModel, xs: &[Vec<FeatureVector>], ys: &[Vec<usize>], l1: f64, l2: f64) -> f64 {
    let nll: f64 = xs.iter().zip(ys).map(|(x, y)| model.log_partition(x) - model.score(x, y)).sum();
    let dense = model.transitions.iter().chain(&model.start).filter(|w| w.is_finite());
    let (d1, d2) = dense.fold((0.0, 0.0), |(a, b), w| (a + w.abs(), b + w * w));
    nll / xs.len().max(1) as f64 + l2 * (model.emissions.l2_sq() + d2) + l1 * (model.emissions.l1_norm() + d1)
}

