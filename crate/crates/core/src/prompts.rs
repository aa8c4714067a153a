//! Class prompts: per-class mean embeddings over selected pixels.
//!
//! The high-confidence set of class `c` holds the pixels where the probe
//! prediction and the upsampled coarse label both equal `c`. When that set is
//! empty the class falls back to the coarse label alone, then to the probe
//! prediction alone, and otherwise becomes inactive.

use std::fs;
use std::path::Path;

use crate::error::{dim_mismatch, invalid, Error, Result};
use crate::tensorio::{self, FeatureMap, LabelMap, NODATA};

pub const PROMPT_MAGIC: &[u8; 4] = b"MSRP";

/// Prompts with a norm below this never take part in cosine matching.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum Provenance {
    ProbeAgreement = 0,
    OracleHr = 1,
    FallbackLrOnly = 2,
    FallbackProbeOnly = 3,
    Inactive = 4,
}

impl Provenance {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Self::ProbeAgreement,
            1 => Self::OracleHr,
            2 => Self::FallbackLrOnly,
            3 => Self::FallbackProbeOnly,
            4 => Self::Inactive,
            other => return Err(invalid(format!("unknown provenance code {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ProbeAgreement => "probe_agreement",
            Self::OracleHr => "oracle_hr",
            Self::FallbackLrOnly => "fallback_lr_only",
            Self::FallbackProbeOnly => "fallback_probe_only",
            Self::Inactive => "inactive",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    classes: usize,
    dim: usize,
    prompts: Vec<f64>,
    support: Vec<u64>,
    provenance: Vec<Provenance>,
}

impl PromptSet {
    pub fn new(
        dim: usize,
        prompts: Vec<Vec<f64>>,
        support: Vec<u64>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        let classes = prompts.len();
        if classes == 0 || support.len() != classes || provenance.len() != classes {
            return Err(dim_mismatch("prompt, support and provenance counts differ"));
        }
        if prompts.iter().any(|p| p.len() != dim) {
            return Err(dim_mismatch(format!("prompt length differs from D={dim}")));
        }
        let flat: Vec<f64> = prompts.into_iter().flatten().collect();
        if let Some(i) = flat.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            classes,
            dim,
            prompts: flat,
            support,
            provenance,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prompt(&self, c: usize) -> &[f64] {
        &self.prompts[c * self.dim..(c + 1) * self.dim]
    }

    pub fn support(&self, c: usize) -> u64 {
        self.support[c]
    }

    pub fn provenance(&self, c: usize) -> Provenance {
        self.provenance[c]
    }

    pub fn norm(&self, c: usize) -> f64 {
        self.prompt(c).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Has support but averages to (numerically) the zero vector.
    pub fn is_degenerate(&self, c: usize) -> bool {
        self.support[c] > 0 && self.norm(c) < DEGENERATE_NORM
    }

    pub fn is_active(&self, c: usize) -> bool {
        self.provenance[c] != Provenance::Inactive && self.norm(c) >= DEGENERATE_NORM
    }

    pub fn active_count(&self) -> usize {
        (0..self.classes).filter(|&c| self.is_active(c)).count()
    }

    /// Unit-norm copy of prompt `c`, `None` when inactive.
    pub fn unit_prompt(&self, c: usize) -> Option<Vec<f64>> {
        if !self.is_active(c) {
            return None;
        }
        let n = self.norm(c);
        Some(self.prompt(c).iter().map(|x| x / n).collect())
    }
}

/// `Ω_c`: flat indices where both the prediction and the coarse label are `c`.
pub fn select_high_confidence(
    probe_pred: &LabelMap,
    lr_up: &LabelMap,
    class: u8,
) -> Result<Vec<usize>> {
    if !probe_pred.same_shape(lr_up) {
        return Err(dim_mismatch(
            "prediction and upsampled labels are not aligned",
        ));
    }
    if class == NODATA {
        return Ok(Vec::new());
    }
    Ok(probe_pred
        .data()
        .iter()
        .zip(lr_up.data())
        .enumerate()
        .filter(|(_, (&p, &l))| p == class && l == class)
        .map(|(i, _)| i)
        .collect())
}

/// Running per-class feature sums for one selection rule.
#[derive(Clone, Debug)]
struct Level {
    provenance: Provenance,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl Level {
    fn new(provenance: Provenance, classes: usize, dim: usize) -> Self {
        Self {
            provenance,
            sums: vec![0.0; classes * dim],
            counts: vec![0; classes],
        }
    }

    fn add(&mut self, rows: &[f32], dim: usize, class: usize, pixel: usize) {
        let x = &rows[pixel * dim..(pixel + 1) * dim];
        for (s, &v) in self.sums[class * dim..(class + 1) * dim].iter_mut().zip(x) {
            *s += v as f64;
        }
        self.counts[class] += 1;
    }
}

/// Pools prompt statistics over any number of images before averaging.
#[derive(Clone, Debug)]
pub struct PromptAccumulator {
    classes: usize,
    dim: usize,
    levels: Vec<Level>,
}

impl PromptAccumulator {
    /// Accumulator for probe-agreement prompts with the fallback chain.
    pub fn probe_agreement(classes: usize, dim: usize) -> Self {
        let levels = [
            Provenance::ProbeAgreement,
            Provenance::FallbackLrOnly,
            Provenance::FallbackProbeOnly,
        ]
        .into_iter()
        .map(|p| Level::new(p, classes, dim))
        .collect();
        Self {
            classes,
            dim,
            levels,
        }
    }

    pub fn oracle(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            levels: vec![Level::new(Provenance::OracleHr, classes, dim)],
        }
    }

    fn check(&self, feats: &FeatureMap, labels: &LabelMap) -> Result<()> {
        if feats.channels() != self.dim {
            return Err(dim_mismatch("feature dim differs from accumulator"));
        }
        if labels.classes() != self.classes {
            return Err(dim_mismatch("class count differs from accumulator"));
        }
        if (feats.height(), feats.width()) != (labels.height(), labels.width()) {
            return Err(dim_mismatch("features and labels are not aligned"));
        }
        Ok(())
    }

    /// Adds one image's probe predictions and upsampled coarse labels.
    pub fn add_probe_image(
        &mut self,
        feats: &FeatureMap,
        probe_pred: &LabelMap,
        lr_up: &LabelMap,
    ) -> Result<()> {
        if self.levels.len() != 3 {
            return Err(invalid("accumulator was created for oracle prompts"));
        }
        self.check(feats, lr_up)?;
        if !probe_pred.same_shape(lr_up) {
            return Err(dim_mismatch(
                "prediction and upsampled labels are not aligned",
            ));
        }
        let rows = feats.to_pixel_major();
        for (i, (&p, &l)) in probe_pred.data().iter().zip(lr_up.data()).enumerate() {
            if l == NODATA {
                continue;
            }
            if p == l {
                self.levels[0].add(&rows, self.dim, l as usize, i);
            }
            self.levels[1].add(&rows, self.dim, l as usize, i);
            if p != NODATA {
                self.levels[2].add(&rows, self.dim, p as usize, i);
            }
        }
        Ok(())
    }

    /// Adds one image with high-resolution reference labels.
    pub fn add_oracle_image(&mut self, feats: &FeatureMap, truth: &LabelMap) -> Result<()> {
        if self.levels.len() != 1 {
            return Err(invalid("accumulator was created for probe prompts"));
        }
        self.check(feats, truth)?;
        let rows = feats.to_pixel_major();
        for (i, &t) in truth.data().iter().enumerate() {
            if t != NODATA {
                self.levels[0].add(&rows, self.dim, t as usize, i);
            }
        }
        Ok(())
    }

    /// Averages each class at the first selection level with support.
    pub fn finish(&self) -> Result<PromptSet> {
        let mut prompts = Vec::with_capacity(self.classes);
        let mut support = Vec::with_capacity(self.classes);
        let mut provenance = Vec::with_capacity(self.classes);
        for c in 0..self.classes {
            match self.levels.iter().find(|lv| lv.counts[c] > 0) {
                Some(lv) => {
                    let n = lv.counts[c] as f64;
                    prompts.push(
                        lv.sums[c * self.dim..(c + 1) * self.dim]
                            .iter()
                            .map(|s| s / n)
                            .collect(),
                    );
                    support.push(lv.counts[c]);
                    provenance.push(lv.provenance);
                }
                None => {
                    prompts.push(vec![0.0; self.dim]);
                    support.push(0);
                    provenance.push(Provenance::Inactive);
                }
            }
        }
        if support.iter().all(|&s| s == 0) {
            return Err(Error::NoSupervision);
        }
        PromptSet::new(self.dim, prompts, support, provenance)
    }
}

/// Mean feature over each class's pixel set. Empty sets become inactive.
pub fn aggregate_prompts(
    feats: &FeatureMap,
    omegas: &[Vec<usize>],
    provenance: Provenance,
) -> Result<PromptSet> {
    let dim = feats.channels();
    let n = feats.pixels();
    let rows = feats.to_pixel_major();
    let mut level = Level::new(provenance, omegas.len(), dim);
    for (c, omega) in omegas.iter().enumerate() {
        for &i in omega {
            if i >= n {
                return Err(invalid(format!("pixel index {i} out of range")));
            }
            level.add(&rows, dim, c, i);
        }
    }
    PromptAccumulator {
        classes: omegas.len(),
        dim,
        levels: vec![level],
    }
    .finish()
}

/// Probe-agreement prompts for a single image, with the fallback chain.
pub fn build_prompts(
    feats: &FeatureMap,
    probe_pred: &LabelMap,
    lr_up: &LabelMap,
) -> Result<PromptSet> {
    let mut acc = PromptAccumulator::probe_agreement(lr_up.classes(), feats.channels());
    acc.add_probe_image(feats, probe_pred, lr_up)?;
    acc.finish()
}

/// Class means under high-resolution reference labels.
pub fn oracle_prompts(feats: &FeatureMap, truth: &LabelMap) -> Result<PromptSet> {
    let mut acc = PromptAccumulator::oracle(truth.classes(), feats.channels());
    acc.add_oracle_image(feats, truth)?;
    acc.finish()
}

/// Per-image mode: average of per-image prompts over the images where the
/// class is active. Supports add up; provenance keeps the weakest rule used.
pub fn average_prompt_sets(sets: &[PromptSet]) -> Result<PromptSet> {
    let first = sets
        .first()
        .ok_or_else(|| invalid("no prompt sets to average"))?;
    let (classes, dim) = (first.classes, first.dim);
    if sets.iter().any(|s| s.classes != classes || s.dim != dim) {
        return Err(dim_mismatch("prompt sets differ in shape"));
    }
    let mut prompts = Vec::with_capacity(classes);
    let mut support = Vec::with_capacity(classes);
    let mut provenance = Vec::with_capacity(classes);
    for c in 0..classes {
        let members: Vec<&PromptSet> = sets.iter().filter(|s| s.support[c] > 0).collect();
        if members.is_empty() {
            prompts.push(vec![0.0; dim]);
            support.push(0);
            provenance.push(Provenance::Inactive);
            continue;
        }
        let k = members.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in &members {
            mean.iter_mut()
                .zip(s.prompt(c))
                .for_each(|(m, x)| *m += x / k);
        }
        prompts.push(mean);
        support.push(members.iter().map(|s| s.support[c]).sum());
        provenance.push(
            members
                .iter()
                .map(|s| s.provenance[c])
                .max()
                .unwrap_or(Provenance::Inactive),
        );
    }
    PromptSet::new(dim, prompts, support, provenance)
}

pub fn encode_prompts(set: &PromptSet) -> Vec<u8> {
    let payload = set.classes * (4 * set.dim + 5);
    let mut buf = tensorio::encode_header(PROMPT_MAGIC, &[set.classes, set.dim], payload);
    tensorio::push_f32s(&mut buf, set.prompts.iter().map(|&x| x as f32));
    for &s in &set.support {
        buf.extend_from_slice(&(s.min(u32::MAX as u64) as u32).to_le_bytes());
    }
    buf.extend(set.provenance.iter().map(|p| p.code()));
    buf
}

pub fn decode_prompts(bytes: &[u8]) -> Result<PromptSet> {
    let (dims, payload) = tensorio::decode_header(bytes, PROMPT_MAGIC, 2)?;
    let (classes, dim) = (dims[0], dims[1]);
    if classes == 0 || dim == 0 {
        return Err(invalid("prompt file with zero classes or dim"));
    }
    tensorio::expect_len(payload, classes * (4 * dim + 5))?;
    let values = tensorio::read_f32s(&payload[..4 * classes * dim]);
    let prompts = values
        .chunks(dim)
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect();
    let support_bytes = &payload[4 * classes * dim..4 * classes * (dim + 1)];
    let support = support_bytes
        .chunks_exact(4)
        .map(|b| tensorio::read_u32(b) as u64)
        .collect();
    let provenance = payload[4 * classes * (dim + 1)..]
        .iter()
        .map(|&b| Provenance::from_code(b))
        .collect::<Result<Vec<_>>>()?;
    PromptSet::new(dim, prompts, support, provenance)
}

pub fn write_prompts(set: &PromptSet, path: impl AsRef<Path>) -> Result<()> {
    tensorio::write_bytes(path.as_ref(), &encode_prompts(set))
}

pub fn read_prompts(path: impl AsRef<Path>) -> Result<PromptSet> {
    decode_prompts(&fs::read(path)?)
}
