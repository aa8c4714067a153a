//! Linear probe trained on frozen features with upsampled coarse labels.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{dim_mismatch, invalid, Error, Result};
use crate::tensorio::{self, FeatureMap, LabelMap, NODATA};

pub const PROBE_MAGIC: &[u8; 4] = b"MSRW";

/// Bias-free linear classifier, `C×D` weights stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
        }
    }

    pub fn from_weights(classes: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if classes == 0 || dim == 0 || weights.len() != classes * dim {
            return Err(dim_mismatch(format!(
                "{} weights for a {classes}×{dim} probe",
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            classes,
            dim,
            weights,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of trainable parameters, `C·D`.
    pub fn parameter_count(&self) -> usize {
        self.classes * self.dim
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.weights[c * self.dim..(c + 1) * self.dim]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * factor).collect(),
            ..self.clone()
        }
    }

    fn logits_into(&self, x: &[f32], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.row(c).iter().zip(x).map(|(w, &f)| w * f as f64).sum();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_pixels: Option<usize>,
    pub seed: u64,
    pub l2_reg: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 20,
            batch_pixels: Some(4096),
            seed: 0,
            l2_reg: 1e-4,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.batch_pixels == Some(0) {
            return Err(invalid("batch_pixels must be at least 1"));
        }
        if !(self.l2_reg.is_finite() && self.l2_reg >= 0.0) {
            return Err(invalid("l2_reg must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedProbe {
    pub probe: LinearProbe,
    /// Mean per-pixel objective of each epoch, measured before each step.
    pub loss_history: Vec<f64>,
}

/// Nearest-neighbour upsampling with floor index mapping
/// `ℓ(u,v) = Y[⌊u·h/H⌋, ⌊v·w/W⌋]`.
pub fn upsample_labels_nn(y_lr: &LabelMap, height: usize, width: usize) -> Result<LabelMap> {
    let (h, w) = (y_lr.height(), y_lr.width());
    if height == 0 || width == 0 {
        return Err(invalid("target dims must be positive"));
    }
    if height < h || width < w {
        return Err(invalid(format!(
            "cannot upsample {h}×{w} labels to {height}×{width}"
        )));
    }
    let mut out = Vec::with_capacity(height * width);
    for u in 0..height {
        let src = u * h / height;
        for v in 0..width {
            out.push(y_lr.get(src, v * w / width));
        }
    }
    LabelMap::new(y_lr.classes(), height, width, out)
}

fn check_alignment(probe: &LinearProbe, feats: &FeatureMap, labels: &LabelMap) -> Result<()> {
    if feats.channels() != probe.dim {
        return Err(dim_mismatch(format!(
            "probe expects D={}, features have {}",
            probe.dim,
            feats.channels()
        )));
    }
    if labels.classes() != probe.classes {
        return Err(dim_mismatch("label class count differs from probe"));
    }
    if (feats.height(), feats.width()) != (labels.height(), labels.width()) {
        return Err(dim_mismatch("features and labels are not aligned"));
    }
    Ok(())
}

const CHUNK: usize = 2048;

/// Summed cross-entropy over `subset` (nodata skipped) and its gradient.
/// Returns `(data_loss, grad, counted_pixels)`; no regulariser.
fn data_loss_grad(
    probe: &LinearProbe,
    rows: &[f32],
    labels: &[u8],
    subset: &[usize],
) -> (f64, Vec<f64>, usize) {
    let (c_n, dim) = (probe.classes, probe.dim);
    // fixed chunking keeps the reduction order independent of thread timing
    let partials: Vec<(f64, Vec<f64>, usize)> = subset
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; c_n * dim];
            let mut logits = vec![0.0; c_n];
            let mut count = 0;
            for &i in chunk {
                let label = labels[i];
                if label == NODATA {
                    continue;
                }
                let x = &rows[i * dim..(i + 1) * dim];
                probe.logits_into(x, &mut logits);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                let log_z = max + z.ln();
                loss += log_z - logits[label as usize];
                for c in 0..c_n {
                    let mut coef = (logits[c] - log_z).exp();
                    if c == label as usize {
                        coef -= 1.0;
                    }
                    let g = &mut grad[c * dim..(c + 1) * dim];
                    for (gd, &xd) in g.iter_mut().zip(x) {
                        *gd += coef * xd as f64;
                    }
                }
                count += 1;
            }
            (loss, grad, count)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; c_n * dim];
    let mut count = 0;
    for (l, g, n) in partials {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        count += n;
    }
    (loss, grad, count)
}

/// Cross-entropy of the probe over the pixels in `subset` plus
/// `l2_reg·‖W‖²/2`, and the exact gradient with respect to `W`.
/// Duplicate indices count once per occurrence.
pub fn probe_loss_and_grad(
    probe: &LinearProbe,
    feats: &FeatureMap,
    labels: &LabelMap,
    subset: &[usize],
    l2_reg: f64,
) -> Result<(f64, Vec<f64>)> {
    check_alignment(probe, feats, labels)?;
    if let Some(&bad) = subset.iter().find(|&&i| i >= feats.pixels()) {
        return Err(invalid(format!("pixel index {bad} out of range")));
    }
    let rows = feats.to_pixel_major();
    let (loss, mut grad, count) = data_loss_grad(probe, &rows, labels.data(), subset);
    if count == 0 {
        return Err(Error::EmptySubset);
    }
    let (reg, _) = add_l2(probe, &mut grad, l2_reg, 1.0);
    Ok((loss + reg, grad))
}

/// Adds `scale·l2·W` to `grad` and returns `(l2·‖W‖²/2, ‖W‖²)`.
fn add_l2(probe: &LinearProbe, grad: &mut [f64], l2_reg: f64, scale: f64) -> (f64, f64) {
    let sq: f64 = probe.weights.iter().map(|w| w * w).sum();
    if l2_reg > 0.0 {
        for (g, w) in grad.iter_mut().zip(&probe.weights) {
            *g += scale * l2_reg * w;
        }
    }
    (0.5 * l2_reg * sq, sq)
}

/// Mini-batch gradient descent from zero weights. Each step moves along the
/// gradient of the batch-mean cross-entropy plus the L2 term.
pub fn train_probe(
    feats: &FeatureMap,
    labels: &LabelMap,
    cfg: &ProbeTrainConfig,
) -> Result<TrainedProbe> {
    cfg.validate()?;
    let mut probe = LinearProbe::zeros(labels.classes(), feats.channels());
    check_alignment(&probe, feats, labels)?;
    let rows = feats.to_pixel_major();
    let mut pixels: Vec<usize> = (0..labels.pixels())
        .filter(|&i| labels.data()[i] != NODATA)
        .collect();
    if pixels.is_empty() {
        return Err(Error::EmptySubset);
    }
    let batch = cfg.batch_pixels.unwrap_or(pixels.len()).min(pixels.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        if batch < pixels.len() {
            pixels.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for chunk in pixels.chunks(batch) {
            let (loss, mut grad, count) = data_loss_grad(&probe, &rows, labels.data(), chunk);
            let inv = 1.0 / count as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            let (reg, _) = add_l2(&probe, &mut grad, cfg.l2_reg, 1.0);
            epoch_loss += loss * inv + reg;
            steps += 1;
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
        }
        history.push(epoch_loss / steps as f64);
    }
    if let Some(i) = probe.weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(TrainedProbe {
        probe,
        loss_history: history,
    })
}

/// Per-pixel argmax of `W·F`, ties to the lowest class.
pub fn probe_predict(probe: &LinearProbe, feats: &FeatureMap) -> Result<LabelMap> {
    if feats.channels() != probe.dim {
        return Err(dim_mismatch("probe and feature dims differ"));
    }
    let dim = probe.dim;
    let rows = feats.to_pixel_major();
    let labels: Vec<u8> = rows
        .par_chunks(dim)
        .map_init(
            || vec![0.0; probe.classes],
            |logits, x| {
                probe.logits_into(x, logits);
                argmax_lowest(logits) as u8
            },
        )
        .collect();
    LabelMap::new(probe.classes, feats.height(), feats.width(), labels)
}

pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn encode_probe(probe: &LinearProbe) -> Vec<u8> {
    let mut buf = tensorio::encode_header(
        PROBE_MAGIC,
        &[probe.classes, probe.dim],
        4 * probe.weights.len(),
    );
    tensorio::push_f32s(&mut buf, probe.weights.iter().map(|&w| w as f32));
    buf
}

pub fn decode_probe(bytes: &[u8]) -> Result<LinearProbe> {
    let (dims, payload) = tensorio::decode_header(bytes, PROBE_MAGIC, 2)?;
    tensorio::expect_len(payload, 4 * dims[0] * dims[1])?;
    let weights = tensorio::read_f32s(payload)
        .into_iter()
        .map(f64::from)
        .collect();
    LinearProbe::from_weights(dims[0], dims[1], weights)
}

pub fn write_probe(probe: &LinearProbe, path: impl AsRef<Path>) -> Result<()> {
    tensorio::write_bytes(path.as_ref(), &encode_probe(probe))
}

pub fn read_probe(path: impl AsRef<Path>) -> Result<LinearProbe> {
    decode_probe(&fs::read(path)?)
}
