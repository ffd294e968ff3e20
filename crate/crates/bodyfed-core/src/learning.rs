//! Tiny local model: multinomial logistic regression over a flat weight
//! vector, mini-batch SGD with energy accounting, update compression, and
//! macro-F1 evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Window;
use crate::error::{Error, Result};

/// Flat model weights, layout `w[class * (d_x + 1) + feature]` with the bias
/// stored at feature index `d_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    pub d_x: usize,
    pub num_classes: usize,
}

/// Layout descriptor written into checkpoints.
pub const MODEL_LAYOUT: &str = "multinomial_logreg_rowmajor_bias_last";

impl ModelParams {
    pub fn zeros(d_x: usize, num_classes: usize) -> Self {
        ModelParams {
            weights: vec![0.0; (d_x + 1) * num_classes],
            d_x,
            num_classes,
        }
    }

    /// Total parameter count d = (d_x + 1) * num_classes.
    pub fn d(&self) -> usize {
        self.weights.len()
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        let stride = self.d_x + 1;
        (0..self.num_classes)
            .map(|c| {
                let row = &self.weights[c * stride..(c + 1) * stride];
                let mut z = row[self.d_x]; // bias
                for (w, x) in row[..self.d_x].iter().zip(features) {
                    z += w * x;
                }
                z
            })
            .collect()
    }

    /// Argmax prediction; ties go to the lowest class index.
    pub fn predict(&self, features: &[f64]) -> usize {
        let logits = self.logits(features);
        let mut best = 0;
        for (c, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = c;
            }
        }
        best
    }

    /// Checkpoint document: dimension, layout descriptor, flat weights at
    /// full precision.
    pub fn to_checkpoint(&self) -> serde_json::Value {
        serde_json::json!({
            "dimension": self.d(),
            "d_x": self.d_x,
            "num_classes": self.num_classes,
            "layout": MODEL_LAYOUT,
            "weights": self.weights,
        })
    }

    pub fn from_checkpoint(doc: &serde_json::Value) -> Result<ModelParams> {
        let layout = doc["layout"].as_str().unwrap_or_default();
        if layout != MODEL_LAYOUT {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint layout {layout:?}"
            )));
        }
        let d_x = doc["d_x"].as_u64().ok_or_else(|| {
            Error::InvalidConfig("checkpoint missing d_x".into())
        })? as usize;
        let num_classes = doc["num_classes"].as_u64().ok_or_else(|| {
            Error::InvalidConfig("checkpoint missing num_classes".into())
        })? as usize;
        let weights: Vec<f64> = doc["weights"]
            .as_array()
            .ok_or_else(|| Error::InvalidConfig("checkpoint missing weights".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| Error::InvalidConfig("non-numeric weight".into())))
            .collect::<Result<_>>()?;
        let expected = (d_x + 1) * num_classes;
        if weights.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: weights.len(),
            });
        }
        Ok(ModelParams {
            weights,
            d_x,
            num_classes,
        })
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean cross-entropy loss and its gradient over the given windows.
pub fn loss_and_gradient(model: &ModelParams, windows: &[Window]) -> (f64, Vec<f64>) {
    let stride = model.d_x + 1;
    let mut grad = vec![0.0; model.d()];
    let mut loss = 0.0;
    let n = windows.len() as f64;
    for w in windows {
        let logits = model.logits(&w.features);
        let probs = softmax(&logits);
        loss += -(probs[w.label].max(1e-300)).ln();
        for c in 0..model.num_classes {
            let coeff = probs[c] - if c == w.label { 1.0 } else { 0.0 };
            let row = &mut grad[c * stride..(c + 1) * stride];
            for (g, &x) in row[..model.d_x].iter_mut().zip(&w.features) {
                *g += coeff * x;
            }
            row[model.d_x] += coeff;
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    (loss / n, grad)
}

/// Mean cross-entropy of the model on the given windows.
pub fn mean_cross_entropy(model: &ModelParams, windows: &[Window]) -> f64 {
    let mut loss = 0.0;
    for w in windows {
        let probs = softmax(&model.logits(&w.features));
        loss += -(probs[w.label].max(1e-300)).ln();
    }
    loss / windows.len() as f64
}

/// Compression scheme for a local update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum CompressionScheme {
    DenseFp32,
    Quantize { bits: u8 },
    TopK { k: usize },
    Sign,
}

impl CompressionScheme {
    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            CompressionScheme::Quantize { bits } => {
                if ![4, 8, 16, 32].contains(bits) {
                    return Err(Error::InvalidConfig(format!(
                        "quantize bits must be one of 4, 8, 16, 32, got {bits}"
                    )));
                }
            }
            CompressionScheme::TopK { k } => {
                if *k < 1 || *k > d {
                    return Err(Error::InvalidConfig(format!(
                        "top-k k must be in [1, {d}], got {k}"
                    )));
                }
            }
            CompressionScheme::DenseFp32 | CompressionScheme::Sign => {}
        }
        Ok(())
    }

    /// Payload size for an update of dimension d, computable before training.
    pub fn payload_bits(&self, d: usize) -> u64 {
        match self {
            CompressionScheme::DenseFp32 => 32 * d as u64,
            CompressionScheme::Quantize { bits } => *bits as u64 * d as u64 + 32,
            CompressionScheme::TopK { k } => *k as u64 * (32 + ceil_log2(d)),
            CompressionScheme::Sign => d as u64 + 32,
        }
    }
}

/// ceil(log2(d)) index bits for top-k coordinates; 0 when d == 1.
pub fn ceil_log2(d: usize) -> u64 {
    debug_assert!(d >= 1);
    (usize::BITS - (d - 1).leading_zeros()) as u64 * u64::from(d > 1)
}

/// One local update: the hub-side reconstruction of the transmitted delta
/// plus its wire accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta {
    /// Dense reconstruction (what the hub applies after decompression).
    pub delta: Vec<f64>,
    /// Transmitted value count.
    pub s: usize,
    /// Bits per transmitted value.
    pub q_bits: u8,
    pub scheme: CompressionScheme,
    pub payload_bits: u64,
    pub source_client: usize,
}

impl UpdateDelta {
    pub fn dense(delta: Vec<f64>, source_client: usize) -> Self {
        let d = delta.len();
        UpdateDelta {
            delta,
            s: d,
            q_bits: 32,
            scheme: CompressionScheme::DenseFp32,
            payload_bits: CompressionScheme::DenseFp32.payload_bits(d),
            source_client,
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.delta.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Compress a raw (dense) update. The returned delta holds the dequantized
/// values, so reconstruction error is already materialized.
pub fn compress(raw: &UpdateDelta, scheme: CompressionScheme) -> Result<UpdateDelta> {
    let d = raw.delta.len();
    scheme.validate(d)?;
    let (delta, s, q_bits) = match scheme {
        CompressionScheme::DenseFp32 => (raw.delta.clone(), d, 32u8),
        CompressionScheme::Quantize { bits } => {
            // Symmetric uniform codebook: scale = max|delta|, integer levels
            // in [-(2^(q-1)-1), 2^(q-1)-1], round half away from zero.
            let scale = raw.delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let levels = ((1u64 << (bits - 1)) - 1) as f64;
            let dequant = if scale == 0.0 {
                vec![0.0; d]
            } else {
                raw.delta
                    .iter()
                    .map(|v| (v / scale * levels).round() * scale / levels)
                    .collect()
            };
            (dequant, d, bits)
        }
        CompressionScheme::TopK { k } => {
            let mut order: Vec<usize> = (0..d).collect();
            // Largest magnitude first; ties by lowest index.
            order.sort_by(|&a, &b| {
                raw.delta[b]
                    .abs()
                    .partial_cmp(&raw.delta[a].abs())
                    .expect("finite delta")
                    .then(a.cmp(&b))
            });
            let mut sparse = vec![0.0; d];
            for &i in order.iter().take(k) {
                sparse[i] = raw.delta[i];
            }
            (sparse, k, 32u8)
        }
        CompressionScheme::Sign => {
            // One global magnitude = mean|delta|; zero entries encode as
            // positive.
            let magnitude = raw.delta.iter().map(|v| v.abs()).sum::<f64>() / d as f64;
            let signed = raw
                .delta
                .iter()
                .map(|v| if v.is_sign_negative() && *v != 0.0 { -magnitude } else { magnitude })
                .collect();
            (signed, d, 1u8)
        }
    };
    Ok(UpdateDelta {
        delta,
        s,
        q_bits,
        scheme,
        payload_bits: scheme.payload_bits(d),
        source_client: raw.source_client,
    })
}

/// Report from one local training pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub local_loss_before: f64,
    pub local_loss_after: f64,
    pub epochs: usize,
    pub samples_used: usize,
    pub train_energy_j: f64,
}

/// Local training knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearningConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Joules per sample per epoch per parameter.
    pub kappa_train_j: f64,
    pub compression: CompressionScheme,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig {
            epochs: 1,
            learning_rate: 0.3,
            batch_size: 16,
            kappa_train_j: 1e-9,
            compression: CompressionScheme::DenseFp32,
        }
    }
}

/// Mini-batch SGD on softmax cross-entropy; the shuffle order comes from the
/// caller's named substream so results are reproducible and
/// parallelization-safe. Returns the raw (dense) delta and a report.
pub fn local_train(
    model: &ModelParams,
    train: &[Window],
    cfg: &LearningConfig,
    client_id: usize,
    rng: &mut impl Rng,
) -> Result<(UpdateDelta, TrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.learning_rate <= 0.0 {
        return Err(Error::InvalidConfig("learning_rate must be positive".into()));
    }
    let loss_before = mean_cross_entropy(model, train);
    let mut local = model.clone();
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let batch = cfg.batch_size.max(1);
    for _epoch in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(batch) {
            let windows: Vec<Window> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (_, grad) = loss_and_gradient(&local, &windows);
            for (w, g) in local.weights.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
        }
    }
    let loss_after = if cfg.epochs == 0 {
        loss_before
    } else {
        mean_cross_entropy(&local, train)
    };
    if !loss_after.is_finite() || !loss_before.is_finite() {
        return Err(Error::NonFiniteLoss { client: client_id });
    }
    let delta: Vec<f64> = local
        .weights
        .iter()
        .zip(&model.weights)
        .map(|(a, b)| a - b)
        .collect();
    let samples_used = train.len();
    let train_energy_j =
        cfg.kappa_train_j * samples_used as f64 * cfg.epochs as f64 * model.d() as f64;
    Ok((
        UpdateDelta::dense(delta, client_id),
        TrainReport {
            local_loss_before: loss_before,
            local_loss_after: loss_after,
            epochs: cfg.epochs,
            samples_used,
            train_energy_j,
        },
    ))
}

/// Evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub accuracy: f64,
}

/// Argmax evaluation. Macro-F1 averages F1 over all `num_classes` classes;
/// classes absent from both predictions and labels contribute F1 = 0.
pub fn evaluate(model: &ModelParams, windows: &[Window]) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = model.num_classes;
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fn_ = vec![0usize; c];
    let mut correct = 0usize;
    for w in windows {
        let pred = model.predict(&w.features);
        if pred == w.label {
            tp[pred] += 1;
            correct += 1;
        } else {
            fp[pred] += 1;
            fn_[w.label] += 1;
        }
    }
    let per_class_f1: Vec<f64> = (0..c)
        .map(|k| {
            let denom = 2 * tp[k] + fp[k] + fn_[k];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .collect();
    let macro_f1 = per_class_f1.iter().sum::<f64>() / c as f64;
    Ok(EvalReport {
        macro_f1,
        per_class_f1,
        accuracy: correct as f64 / windows.len() as f64,
    })
}
