//! Nearest-prompt classification and the k-means + voting baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{dim_mismatch, invalid, Error, Result};
use crate::prompts::PromptSet;
use crate::synth::modal_class;
use crate::tensorio::{FeatureMap, LabelMap, ScoreMap, NODATA};

/// Score given to inactive classes so they never win an argmax.
pub const INACTIVE_SCORE: f32 = -1e30;

/// Cosine similarity of every pixel feature against every active prompt.
pub fn cosine_scores(feats: &FeatureMap, prompts: &PromptSet) -> Result<ScoreMap> {
    if feats.channels() != prompts.dim() {
        return Err(dim_mismatch(format!(
            "features have D={}, prompts D={}",
            feats.channels(),
            prompts.dim()
        )));
    }
    let classes = prompts.classes();
    if classes < 2 {
        return Err(invalid("need at least two classes"));
    }
    let units: Vec<Option<Vec<f64>>> = (0..classes).map(|c| prompts.unit_prompt(c)).collect();
    if units.iter().all(Option::is_none) {
        return Err(Error::NoActivePrompts);
    }
    let dim = feats.channels();
    let n = feats.pixels();
    let rows = feats.to_pixel_major();
    let pixel_scores: Vec<f32> = rows
        .par_chunks(dim)
        .flat_map_iter(|x| {
            let norm = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            units.iter().map(move |unit| match unit {
                None => INACTIVE_SCORE,
                Some(_) if norm == 0.0 => 0.0,
                Some(p) => (p.iter().zip(x).map(|(a, &b)| a * b as f64).sum::<f64>() / norm) as f32,
            })
        })
        .collect();
    let mut data = vec![0.0f32; classes * n];
    for (i, s) in pixel_scores.chunks_exact(classes).enumerate() {
        for (c, &v) in s.iter().enumerate() {
            data[c * n + i] = v;
        }
    }
    ScoreMap::new(classes, feats.height(), feats.width(), data)
}

/// Per-pixel argmax over classes, ties to the lowest index.
pub fn argmax_labels(scores: &ScoreMap) -> LabelMap {
    let (classes, n) = (scores.classes(), scores.pixels());
    let data = scores.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if data[c * n + i] > data[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(classes, scores.height(), scores.width(), labels)
        .expect("argmax stays within class range")
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 8,
            max_iters: 50,
            seed: 0,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    /// `k×D`, row-major.
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective_history: Vec<f64>,
}

fn sq_dist(x: &[f32], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(&a, &b)| (a as f64 - b).powi(2)).sum()
}

fn nearest(x: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Seeded k-means++ initialisation: first centre uniform, then D²-weighted.
fn init_plus_plus(rows: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rows.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(
        rows[first * dim..(first + 1) * dim]
            .iter()
            .map(|&x| x as f64),
    );
    let mut d2: Vec<f64> = rows
        .chunks_exact(dim)
        .map(|x| sq_dist(x, &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend(rows[pick * dim..(pick + 1) * dim].iter().map(|&x| x as f64));
        for (i, x) in rows.chunks_exact(dim).enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &centroids[start..start + dim]));
        }
    }
    centroids
}

/// Lloyd's algorithm on pixel-major rows. An empty cluster is re-seeded at
/// the point farthest from its current centroid.
pub fn kmeans(rows: &[f32], dim: usize, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k < 2 {
        return Err(invalid("k must be at least 2"));
    }
    if !(cfg.tol.is_finite() && cfg.tol > 0.0) {
        return Err(invalid("tol must be positive"));
    }
    if dim == 0 || rows.len() % dim != 0 {
        return Err(dim_mismatch("row buffer is not a multiple of dim"));
    }
    let n = rows.len() / dim;
    if n < cfg.k {
        return Err(invalid(format!(
            "{n} points cannot form {} clusters",
            cfg.k
        )));
    }
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = init_plus_plus(rows, dim, k, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut history = Vec::new();

    for _ in 0..cfg.max_iters.max(1) {
        let assigned: Vec<(usize, f64)> = rows
            .par_chunks(dim)
            .map(|x| nearest(x, &centroids, dim))
            .collect();
        for (i, (a, d)) in assigned.into_iter().enumerate() {
            assignment[i] = a;
            dists[i] = d;
        }
        history.push(dists.iter().sum());

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, x) in rows.chunks_exact(dim).enumerate() {
            let a = assignment[i];
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(x) {
                *s += v as f64;
            }
        }
        let mut shift = 0.0f64;
        let mut taken = Vec::new();
        for j in 0..k {
            let new: Vec<f64> = if counts[j] > 0 {
                sums[j * dim..(j + 1) * dim]
                    .iter()
                    .map(|s| s / counts[j] as f64)
                    .collect()
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .unwrap_or(0);
                taken.push(far);
                rows[far * dim..(far + 1) * dim]
                    .iter()
                    .map(|&x| x as f64)
                    .collect()
            };
            let old = &mut centroids[j * dim..(j + 1) * dim];
            shift = shift.max(
                old.iter()
                    .zip(&new)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            );
            old.copy_from_slice(&new);
        }
        if shift < cfg.tol {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignment,
        objective_history: history,
    })
}

/// Clusters pixel features, then names each cluster after the modal coarse
/// label among its members.
pub fn kmeans_voting_baseline(
    feats: &FeatureMap,
    lr_up: &LabelMap,
    cfg: &KMeansConfig,
) -> Result<LabelMap> {
    if (feats.height(), feats.width()) != (lr_up.height(), lr_up.width()) {
        return Err(dim_mismatch("features and labels are not aligned"));
    }
    let rows = feats.to_pixel_major();
    let result = kmeans(&rows, feats.channels(), cfg)?;
    let classes = lr_up.classes();
    let mut votes = vec![vec![0usize; classes]; cfg.k];
    for (&a, &l) in result.assignment.iter().zip(lr_up.data()) {
        if l != NODATA {
            votes[a][l as usize] += 1;
        }
    }
    let mapping: Vec<u8> = votes
        .iter()
        .map(|v| modal_class(v).unwrap_or(0) as u8)
        .collect();
    let labels = result.assignment.iter().map(|&a| mapping[a]).collect();
    LabelMap::new(classes, feats.height(), feats.width(), labels)
}
