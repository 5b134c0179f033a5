//! Harmful image–text pair detector over frozen embeddings.
//!
//! Both embeddings are ℓ2-normalized and fused into
//! `z = [img ; txt ; img − txt ; img ⊙ txt ; cos]` (length `4d + 1`), which
//! feeds a two-hidden-layer ReLU MLP with a sigmoid output. Training uses
//! binary cross-entropy and Adam; only the MLP is learned.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
/// Probability clip used by [`bce_loss`].
pub const BCE_EPSILON: f64 = 1e-7;
const MIN_NORM: f64 = 1e-12;

/// One image–text sample with its frozen embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPair {
    pub id: String,
    #[serde(default)]
    pub label: Option<u8>,
    pub dim: usize,
    pub e_img: Vec<f64>,
    pub e_txt: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl EmbeddingPair {
    pub fn new(id: impl Into<String>, e_img: Vec<f64>, e_txt: Vec<f64>, label: Option<u8>) -> Self {
        EmbeddingPair {
            id: id.into(),
            label,
            dim: e_img.len(),
            e_img,
            e_txt,
            text: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.e_img.len() != self.dim || self.e_txt.len() != self.dim {
            return Err(Error::Shape(format!(
                "sample {}: dim {} but vectors have {} and {} components",
                self.id,
                self.dim,
                self.e_img.len(),
                self.e_txt.len()
            )));
        }
        if self.e_img.iter().chain(&self.e_txt).any(|v| !v.is_finite()) {
            return Err(Error::DegenerateEmbedding(format!(
                "sample {} has non-finite components",
                self.id
            )));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(Error::InvalidParams(format!("sample {} label {l} is not 0/1", self.id)));
            }
        }
        Ok(())
    }
}

/// Reads a JSON-lines embedding dataset; every record must share one `dim`.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<EmbeddingPair>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs: Vec<EmbeddingPair> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: EmbeddingPair = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: i + 1,
            reason: e.to_string(),
        })?;
        pair.validate().map_err(|e| Error::Format {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if let Some(first) = pairs.first() {
            if first.dim != pair.dim {
                return Err(Error::Format {
                    line: i + 1,
                    reason: format!("dim {} differs from dataset dim {}", pair.dim, first.dim),
                });
            }
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_jsonl(path: impl AsRef<Path>, pairs: &[EmbeddingPair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn normalize(e: &[f64]) -> Result<Vec<f64>> {
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > MIN_NORM) {
        return Err(Error::DegenerateEmbedding(format!("vector norm {norm} is (near) zero")));
    }
    Ok(e.iter().map(|v| v / norm).collect())
}

/// `[img ; txt ; img − txt ; img ⊙ txt ; cos]` over normalized embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionVector(pub Vec<f64>);

impl FusionVector {
    pub fn embedding_dim(&self) -> usize {
        (self.0.len() - 1) / 4
    }

    pub fn cosine(&self) -> f64 {
        *self.0.last().expect("fusion vector is never empty")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn fuse(pair: &EmbeddingPair) -> Result<FusionVector> {
    pair.validate()?;
    let img = normalize(&pair.e_img)?;
    let txt = normalize(&pair.e_txt)?;
    let d = img.len();
    let mut z = Vec::with_capacity(4 * d + 1);
    z.extend_from_slice(&img);
    z.extend_from_slice(&txt);
    z.extend(img.iter().zip(&txt).map(|(a, b)| a - b));
    z.extend(img.iter().zip(&txt).map(|(a, b)| a * b));
    z.push(img.iter().zip(&txt).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0));
    Ok(FusionVector(z))
}

/// MLP weights. Matrices are row-major `(out × in)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub format_version: u32,
    pub input_dim: usize,
    pub h1: usize,
    pub h2: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
    pub dropout_rate: f64,
    pub threshold: f64,
}

impl DetectorModel {
    pub fn zeros(input_dim: usize, h1: usize, h2: usize) -> Self {
        DetectorModel {
            format_version: CHECKPOINT_FORMAT_VERSION,
            input_dim,
            h1,
            h2,
            w1: vec![0.0; h1 * input_dim],
            b1: vec![0.0; h1],
            w2: vec![0.0; h2 * h1],
            b2: vec![0.0; h2],
            w3: vec![0.0; h2],
            b3: 0.0,
            dropout_rate: 0.3,
            threshold: 0.5,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(input_dim: usize, h1: usize, h2: usize, rng: &mut R) -> Self {
        let mut m = DetectorModel::zeros(input_dim, h1, h2);
        let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.gen_range(-limit..limit));
        };
        fill(&mut m.w1, input_dim, h1);
        fill(&mut m.w2, h1, h2);
        fill(&mut m.w3, h2, 1);
        m
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = [
            ("w1", self.w1.len(), self.h1 * self.input_dim),
            ("b1", self.b1.len(), self.h1),
            ("w2", self.w2.len(), self.h2 * self.h1),
            ("b2", self.b2.len(), self.h2),
            ("w3", self.w3.len(), self.h2),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Shape(format!("{name} has {got} values, expected {want}")));
            }
        }
        let finite = [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
            && self.b3.is_finite();
        if !finite {
            return Err(Error::InvalidParams("model has non-finite parameters".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidParams(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParams(format!("dropout {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: DetectorModel = serde_json::from_str(&text)?;
        if model.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidParams(format!(
                "checkpoint format {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                model.format_version
            )));
        }
        model.validate()?;
        Ok(model)
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub p: f64,
    pub logit: f64,
    pub pre1: Vec<f64>,
    /// Post-ReLU, post-dropout.
    pub h1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub h2: Vec<f64>,
    /// Per-unit dropout multipliers (`0` or `1/(1−rate)`; all `1` in eval).
    pub scale1: Vec<f64>,
    pub scale2: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    w.chunks_exact(n_in)
        .zip(b)
        .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

fn dropout_scales(n: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

/// Runs the MLP on `z`. Passing an RNG selects training mode, where inverted
/// dropout is applied after each hidden layer; `None` is evaluation mode.
pub fn forward(model: &DetectorModel, z: &[f64], rng: Option<&mut dyn RngCore>) -> Result<ForwardPass> {
    if z.len() != model.input_dim {
        return Err(Error::Shape(format!(
            "input has {} features, model expects {}",
            z.len(),
            model.input_dim
        )));
    }
    let (scale1, scale2) = match rng {
        Some(rng) if model.dropout_rate > 0.0 => (
            dropout_scales(model.h1, model.dropout_rate, rng),
            dropout_scales(model.h2, model.dropout_rate, rng),
        ),
        _ => (vec![1.0; model.h1], vec![1.0; model.h2]),
    };
    let pre1 = affine(&model.w1, &model.b1, z);
    let h1: Vec<f64> = pre1.iter().zip(&scale1).map(|(v, s)| v.max(0.0) * s).collect();
    let pre2 = affine(&model.w2, &model.b2, &h1);
    let h2: Vec<f64> = pre2.iter().zip(&scale2).map(|(v, s)| v.max(0.0) * s).collect();
    let logit = model.b3 + model.w3.iter().zip(&h2).map(|(a, v)| a * v).sum::<f64>();
    Ok(ForwardPass {
        p: sigmoid(logit),
        logit,
        pre1,
        h1,
        pre2,
        h2,
        scale1,
        scale2,
    })
}

/// Returns `(p, ŷ)` with `ŷ = 1` iff `p ≥ threshold`.
pub fn classify(model: &DetectorModel, pair: &EmbeddingPair) -> Result<(f64, u8)> {
    let z = fuse(pair)?;
    let p = forward(model, z.as_slice(), None)?.p;
    Ok((p, u8::from(p >= model.threshold)))
}

/// Mean binary cross-entropy with probabilities clipped to `[ε, 1 − ε]`.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Parameter gradients laid out like [`DetectorModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

impl Gradients {
    fn zeros_like(m: &DetectorModel) -> Self {
        Gradients {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
            w3: vec![0.0; m.w3.len()],
            b3: 0.0,
        }
    }

    fn scale(&mut self, k: f64) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3] {
            v.iter_mut().for_each(|g| *g *= k);
        }
        self.b3 *= k;
    }
}

/// Adds the gradient of one sample's unclipped BCE to `grads`.
fn accumulate(model: &DetectorModel, z: &[f64], fp: &ForwardPass, y: f64, grads: &mut Gradients) {
    let d_logit = fp.p - y;
    grads.b3 += d_logit;
    let mut d_pre2 = vec![0.0; model.h2];
    for j in 0..model.h2 {
        grads.w3[j] += d_logit * fp.h2[j];
        if fp.pre2[j] > 0.0 {
            d_pre2[j] = d_logit * model.w3[j] * fp.scale2[j];
        }
    }
    let mut d_h1 = vec![0.0; model.h1];
    for (j, &g) in d_pre2.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grads.b2[j] += g;
        let row = &model.w2[j * model.h1..][..model.h1];
        let grow = &mut grads.w2[j * model.h1..][..model.h1];
        for k in 0..model.h1 {
            grow[k] += g * fp.h1[k];
            d_h1[k] += g * row[k];
        }
    }
    let n_in = model.input_dim;
    for k in 0..model.h1 {
        if fp.pre1[k] <= 0.0 || fp.scale1[k] == 0.0 {
            continue;
        }
        let g = d_h1[k] * fp.scale1[k];
        grads.b1[k] += g;
        for (gw, &x) in grads.w1[k * n_in..][..n_in].iter_mut().zip(z) {
            *gw += g * x;
        }
    }
}

/// Mean BCE (unclipped) and its gradient over a batch in evaluation mode.
pub fn loss_and_gradients(model: &DetectorModel, batch: &[(Vec<f64>, u8)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut grads = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for (z, y) in batch {
        let fp = forward(model, z, None)?;
        loss += if *y == 1 { -fp.p.ln() } else { -(1.0 - fp.p).ln() };
        accumulate(model, z, &fp, f64::from(*y), &mut grads);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub validation_fraction: f64,
    pub hidden1: usize,
    pub hidden2: usize,
    pub dropout_rate: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 64,
            rng_seed: 0,
            validation_fraction: 0.2,
            hidden1: 512,
            hidden2: 128,
            dropout_rate: 0.3,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParams("learning_rate must be > 0".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidParams("validation_fraction must be in (0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(Error::InvalidParams("epochs, batch_size and hidden sizes must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochStats]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(model: &DetectorModel) -> Self {
        Adam {
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut DetectorModel, g: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        };
        update(&mut model.w1, &g.w1, &mut self.m.w1, &mut self.v.w1);
        update(&mut model.b1, &g.b1, &mut self.m.b1, &mut self.v.b1);
        update(&mut model.w2, &g.w2, &mut self.m.w2, &mut self.v.w2);
        update(&mut model.b2, &g.b2, &mut self.m.b2, &mut self.v.b2);
        update(&mut model.w3, &g.w3, &mut self.m.w3, &mut self.v.w3);
        update(
            std::slice::from_mut(&mut model.b3),
            std::slice::from_ref(&g.b3),
            std::slice::from_mut(&mut self.m.b3),
            std::slice::from_mut(&mut self.v.b3),
        );
    }
}

fn labeled(pairs: &[EmbeddingPair]) -> Result<Vec<u8>> {
    pairs
        .iter()
        .map(|p| {
            p.label
                .ok_or_else(|| Error::DegenerateDataset(format!("sample {} has no label", p.id)))
        })
        .collect()
}

/// Eval-mode probabilities, computed in parallel, returned in input order.
fn predict_fused(model: &DetectorModel, zs: &[Vec<f64>]) -> Result<Vec<f64>> {
    zs.par_iter()
        .map(|z| forward(model, z, None).map(|f| f.p))
        .collect()
}

fn loss_and_accuracy(model: &DetectorModel, zs: &[Vec<f64>], ys: &[u8]) -> Result<(f64, f64)> {
    let probs = predict_fused(model, zs)?;
    let correct = probs
        .iter()
        .zip(ys)
        .filter(|(&p, &y)| u8::from(p >= model.threshold) == y)
        .count();
    Ok((bce_loss(&probs, ys)?, correct as f64 / ys.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: DetectorModel,
    pub history: Vec<EpochStats>,
    /// Dataset indices held out for validation.
    pub validation: Vec<usize>,
}

/// Mini-batch Adam on BCE over a stratified train/validation split.
pub fn train(dataset: &[EmbeddingPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels = labeled(dataset)?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives < 2 || negatives < 2 {
        return Err(Error::DegenerateDataset(format!(
            "need at least 2 samples per class, got {positives} harmful / {negatives} benign"
        )));
    }
    let zs: Vec<Vec<f64>> = dataset
        .iter()
        .map(|p| fuse(p).map(|z| z.0))
        .collect::<Result<_>>()?;
    let input_dim = zs[0].len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    // Stratified split so both classes appear on each side.
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, idx.len() - 1);
        val_idx.extend_from_slice(&idx[..n_val]);
        train_idx.extend_from_slice(&idx[n_val..]);
    }
    let gather = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<u8>) {
        (idx.iter().map(|&i| zs[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (train_z, train_y) = gather(&train_idx);
    let (val_z, val_y) = gather(&val_idx);

    let mut model = DetectorModel::glorot(input_dim, cfg.hidden1, cfg.hidden2, &mut rng);
    model.dropout_rate = cfg.dropout_rate;
    model.threshold = cfg.threshold;
    model.validate()?;

    let mut adam = Adam::new(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, DetectorModel)> = None;
    let mut order: Vec<usize> = (0..train_z.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&model);
            for &i in batch {
                let fp = forward(&model, &train_z[i], Some(&mut rng))?;
                accumulate(&model, &train_z[i], &fp, f64::from(train_y[i]), &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model, &grads, cfg.learning_rate);
        }
        let (train_loss, train_accuracy) = loss_and_accuracy(&model, &train_z, &train_y)?;
        let (val_loss, val_accuracy) = loss_and_accuracy(&model, &val_z, &val_y)?;
        log::debug!(
            "epoch {epoch}: train loss {train_loss:.4} acc {train_accuracy:.3}, val loss {val_loss:.4} acc {val_accuracy:.3}"
        );
        history.push(EpochStats {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(l, _)| val_loss < *l) {
            best = Some((val_loss, model.clone()));
        }
    }
    let (_, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        history,
        validation: val_idx,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc_roc: f64,
}

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, counting ties as one half. Uses mid-ranks.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateDataset("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Threshold metrics from precomputed probabilities.
pub fn metrics_from_scores(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    let auc = auc_roc(probs, labels)?;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Metrics {
        accuracy: ratio(tp + tn, labels.len()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        auc_roc: auc,
    })
}

pub fn predict(model: &DetectorModel, dataset: &[EmbeddingPair]) -> Result<Vec<f64>> {
    let zs: Vec<Vec<f64>> = dataset
        .iter()
        .map(|p| fuse(p).map(|z| z.0))
        .collect::<Result<_>>()?;
    predict_fused(model, &zs)
}

pub fn evaluate(model: &DetectorModel, dataset: &[EmbeddingPair]) -> Result<Metrics> {
    let labels = labeled(dataset)?;
    let probs = predict(model, dataset)?;
    metrics_from_scores(&probs, &labels, model.threshold)
}

/// Two Gaussian clusters of embedding pairs, `per_class` samples each.
///
/// Each class has its own image and text centre drawn from `N(0, I)`;
/// samples add isotropic noise with standard deviation `spread`.
pub fn synthetic_clusters(dim: usize, per_class: usize, spread: f64, seed: u64) -> Vec<EmbeddingPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let noise = Normal::new(0.0, spread).unwrap();
    let mut centre = || -> Vec<f64> { (0..dim).map(|_| unit.sample(&mut rng)).collect() };
    let centres = [(centre(), centre()), (centre(), centre())];
    let mut out = Vec::with_capacity(2 * per_class);
    for i in 0..per_class {
        for (label, (ci, ct)) in centres.iter().enumerate() {
            let e_img = ci.iter().map(|c| c + noise.sample(&mut rng)).collect();
            let e_txt = ct.iter().map(|c| c + noise.sample(&mut rng)).collect();
            out.push(EmbeddingPair::new(
                format!("syn-{label}-{i:04}"),
                e_img,
                e_txt,
                Some(label as u8),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn small_model(seed: u64) -> DetectorModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DetectorModel::glorot(17, 5, 3, &mut rng);
        m.b1.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        m.b2.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        m
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = normalize(&[0.6, 0.8]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-12 && (u[1] - 0.8).abs() < 1e-12);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn fuse_hand_case() {
        let z = fuse(&EmbeddingPair::new("x", vec![1.0, 0.0], vec![0.0, 1.0], None)).unwrap();
        assert_eq!(z.0, vec![1.0, 0.0, 0.0, 1.0, 1.0, -1.0, 0.0, 0.0, 0.0]);
        assert_eq!(z.embedding_dim(), 2);
    }

    #[test]
    fn fuse_identical_and_antipodal() {
        let v = vec![0.6, 0.0, 0.8];
        let z = fuse(&EmbeddingPair::new("a", v.clone(), v.clone(), None)).unwrap();
        assert!(z.0[6..9].iter().all(|x| x.abs() < 1e-12));
        for (i, x) in v.iter().enumerate() {
            assert!((z.0[9 + i] - x * x).abs() < 1e-12);
        }
        assert!((z.cosine() - 1.0).abs() < 1e-12);

        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let z = fuse(&EmbeddingPair::new("b", v.clone(), neg, None)).unwrap();
        for (i, x) in v.iter().enumerate() {
            assert!((z.0[6 + i] - 2.0 * x).abs() < 1e-12);
        }
        assert!((z.cosine() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_rejects_bad_pairs() {
        let zero = EmbeddingPair::new("z", vec![0.0; 3], vec![1.0; 3], None);
        assert!(matches!(fuse(&zero), Err(Error::DegenerateEmbedding(_))));
        let nan = EmbeddingPair::new("n", vec![f64::NAN, 1.0], vec![1.0, 1.0], None);
        assert!(fuse(&nan).is_err());
        let mut ragged = EmbeddingPair::new("r", vec![1.0; 3], vec![1.0; 3], None);
        ragged.e_txt.pop();
        assert!(matches!(fuse(&ragged), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_closed_forms() {
        let mut m = DetectorModel::zeros(9, 4, 2);
        let z = vec![0.3; 9];
        assert_eq!(forward(&m, &z, None).unwrap().p, 0.5);
        m.b3 = 10.0;
        let p = forward(&m, &z, None).unwrap().p;
        assert!((p - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-15);
        assert!((p - 0.99995).abs() < 1e-5);
        assert!(matches!(forward(&m, &[1.0; 8], None), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_hand_network() {
        // z = (1, −1); W1 = [[1, 2], [−1, 0.5]], b1 = (0.5, 0.25)
        // pre1 = (1 − 2 + 0.5, −1 − 0.5 + 0.25) = (−0.5, −1.25)? use b1 = (2, 2)
        // pre1 = (1, 0.5), h1 = (1, 0.5)
        // W2 = [[0.5, −1], [1, 1]], b2 = (0.1, −0.2): pre2 = (0.1, 1.3), h2 = (0.1, 1.3)
        // o = 2·0.1 − 0.5·1.3 + 0.3 = −0.15
        let m = DetectorModel {
            w1: vec![1.0, 2.0, -1.0, 0.5],
            b1: vec![2.0, 2.0],
            w2: vec![0.5, -1.0, 1.0, 1.0],
            b2: vec![0.1, -0.2],
            w3: vec![2.0, -0.5],
            b3: 0.3,
            ..DetectorModel::zeros(2, 2, 2)
        };
        let f = forward(&m, &[1.0, -1.0], None).unwrap();
        assert!((f.h1[0] - 1.0).abs() < 1e-12 && (f.h1[1] - 0.5).abs() < 1e-12);
        assert!((f.h2[0] - 0.1).abs() < 1e-12 && (f.h2[1] - 1.3).abs() < 1e-12);
        assert!((f.logit + 0.15).abs() < 1e-12);
        assert!((f.p - 1.0 / (1.0 + 0.15f64.exp())).abs() < 1e-9);
    }

    #[test]
    fn classify_boundary_and_threshold_monotonicity() {
        let m = DetectorModel::zeros(9, 3, 2);
        let pair = EmbeddingPair::new("p", vec![1.0, 2.0], vec![2.0, 1.0], None);
        assert_eq!(classify(&m, &pair).unwrap(), (0.5, 1));
        let trained = small_model(4);
        let pair4 = EmbeddingPair::new("q", vec![1.0, -2.0, 0.5, 3.0], vec![0.2, 1.0, 1.0, -1.0], None);
        let mut last = 1;
        for t in 1..100 {
            let mut m = trained.clone();
            m.threshold = t as f64 / 100.0;
            let (_, y) = classify(&m, &pair4).unwrap();
            assert!(y <= last);
            last = y;
        }
    }

    #[test]
    fn bce_closed_forms() {
        assert!(bce_loss(&[1.0, 0.0], &[1, 0]).unwrap() < 1e-6);
        assert!((bce_loss(&[0.5; 4], &[1, 0, 1, 0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        assert!((bce_loss(&[0.25], &[1]).unwrap() + 0.25f64.ln()).abs() < 1e-9);
        assert!(matches!(bce_loss(&[], &[]), Err(Error::EmptyBatch)));
        assert!(bce_loss(&[0.5], &[1, 0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = small_model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch: Vec<(Vec<f64>, u8)> = (0..6)
            .map(|i| {
                let p = EmbeddingPair::new(
                    "g",
                    (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    None,
                );
                (fuse(&p).unwrap().0, (i % 2) as u8)
            })
            .collect();
        let (_, g) = loss_and_gradients(&m, &batch).unwrap();
        let h = 1e-5;
        let loss = |m: &DetectorModel| loss_and_gradients(m, &batch).unwrap().0;
        let check = |analytic: f64, plus: &DetectorModel, minus: &DetectorModel| {
            let numeric = (loss(plus) - loss(minus)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!((analytic - numeric).abs() / denom <= 1e-4, "{analytic} vs {numeric}");
        };
        for i in 0..m.w1.len() {
            let (mut p, mut q) = (m.clone(), m.clone());
            p.w1[i] += h;
            q.w1[i] -= h;
            check(g.w1[i], &p, &q);
        }
        for i in 0..m.w2.len() {
            let (mut p, mut q) = (m.clone(), m.clone());
            p.w2[i] += h;
            q.w2[i] -= h;
            check(g.w2[i], &p, &q);
        }
        for i in 0..m.w3.len() {
            let (mut p, mut q) = (m.clone(), m.clone());
            p.w3[i] += h;
            q.w3[i] -= h;
            check(g.w3[i], &p, &q);
        }
        let (mut p, mut q) = (m.clone(), m.clone());
        p.b3 += h;
        q.b3 -= h;
        check(g.b3, &p, &q);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        // All-positive weights and inputs keep every ReLU in its linear
        // regime, so the logit is linear in each independent mask.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = DetectorModel::zeros(6, 8, 4);
        for w in [&mut m.w1, &mut m.w2, &mut m.w3] {
            w.iter_mut().for_each(|v| *v = rng.gen_range(0.1..1.0));
        }
        m.dropout_rate = 0.3;
        let z = vec![0.5, 0.2, 0.9, 0.1, 0.4, 0.7];
        let eval = forward(&m, &z, None).unwrap().logit;
        let n = 40_000;
        let mean = (0..n)
            .map(|_| forward(&m, &z, Some(&mut rng)).unwrap().logit)
            .sum::<f64>()
            / n as f64;
        assert!((mean - eval).abs() / eval < 0.01, "mc {mean} vs eval {eval}");
    }

    /// Brute-force pairwise AUC.
    fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(auc_roc(&[0.9, 0.4, 0.6, 0.1], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(auc_pairs(&[0.9, 0.4, 0.6, 0.1], &[1, 1, 0, 0]), 0.75);
        assert_eq!(auc_roc(&[0.5; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
        let m = metrics_from_scores(&[0.9, 0.9, 0.1, 0.1], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.auc_roc), (1.0, 1.0, 1.0, 1.0));
        assert!(matches!(auc_roc(&[0.1, 0.2], &[1, 1]), Err(Error::DegenerateDataset(_))));
    }

    #[test]
    fn train_rejects_single_class() {
        let mut data = synthetic_clusters(4, 5, 0.1, 1);
        data.retain(|p| p.label == Some(1));
        assert!(matches!(
            train(&data, &TrainConfig::default()),
            Err(Error::DegenerateDataset(_))
        ));
        assert!(matches!(evaluate(&DetectorModel::zeros(17, 2, 2), &data), Err(Error::DegenerateDataset(_))));
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let data = synthetic_clusters(8, 40, 0.8, 5);
        let cfg = TrainConfig { hidden1: 16, hidden2: 8, epochs: 8, batch_size: 16, ..Default::default() };
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
        assert_eq!(a.validation.len(), 16);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = small_model(3);
        m.save(&path).unwrap();
        assert_eq!(DetectorModel::load(&path).unwrap(), m);
        let mut bad = m.clone();
        bad.format_version = 99;
        bad.save(&path).unwrap();
        assert!(DetectorModel::load(&path).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_dim_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = synthetic_clusters(3, 2, 0.5, 9);
        write_jsonl(&path, &data).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), data);
        let mixed = format!(
            "{}\n{}\n",
            serde_json::to_string(&EmbeddingPair::new("a", vec![1.0, 2.0], vec![1.0, 0.0], Some(0))).unwrap(),
            serde_json::to_string(&EmbeddingPair::new("b", vec![1.0; 3], vec![1.0; 3], Some(1))).unwrap()
        );
        std::fs::write(&path, mixed).unwrap();
        assert!(matches!(load_jsonl(&path), Err(Error::Format { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(scores in proptest::collection::vec(0u8..10, 2..100), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<u8> = scores.iter().map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let s: Vec<f64> = scores.iter().map(|&v| f64::from(v) / 10.0).collect();
            prop_assert!((auc_roc(&s, &labels).unwrap() - auc_pairs(&s, &labels)).abs() < 1e-12);
        }

        #[test]
        fn fusion_shape(d in 1usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(0.1..2.0)).collect::<Vec<f64>>();
            let pair = EmbeddingPair::new("p", v(&mut rng), v(&mut rng), None);
            let z = fuse(&pair).unwrap();
            prop_assert_eq!(z.0.len(), 4 * d + 1);
            let n1: f64 = z.0[..d].iter().map(|x| x * x).sum();
            let n2: f64 = z.0[d..2 * d].iter().map(|x| x * x).sum();
            prop_assert!((n1 - 1.0).abs() < 1e-6 && (n2 - 1.0).abs() < 1e-6);
            let dot: f64 = z.0[..d].iter().zip(&z.0[d..2 * d]).map(|(a, b)| a * b).sum();
            prop_assert!((z.cosine() - dot).abs() < 1e-6);
        }

        #[test]
        fn classify_ignores_embedding_scale(c in 0.01f64..100.0, seed in any::<u64>()) {
            let model = small_model(seed % 7);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let txt: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = img.iter().map(|v| v * c).collect();
            let a = classify(&model, &EmbeddingPair::new("a", img, txt.clone(), None)).unwrap();
            let b = classify(&model, &EmbeddingPair::new("b", scaled, txt, None)).unwrap();
            prop_assert_eq!(a.1, b.1);
            prop_assert!((a.0 - b.0).abs() < 1e-9);
        }
    }
}
