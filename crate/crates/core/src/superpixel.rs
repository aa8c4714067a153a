//! SLIC superpixels and per-segment summaries used as graph nodes.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use crate::error::{dim_mismatch, invalid, Result};
use crate::tensorio::{self, FeatureMap, ImageRaster, ScoreMap};

pub const SEGMENT_MAGIC: &[u8; 4] = b"MSRS";

#[derive(Clone, Debug, PartialEq)]
pub struct SlicConfig {
    pub n_segments: usize,
    pub compactness: f64,
    pub max_iters: usize,
    pub enforce_connectivity: bool,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            n_segments: 8000,
            compactness: 10.0,
            max_iters: 10,
            enforce_connectivity: true,
        }
    }
}

/// Pixel → segment assignment with contiguous ids `0..count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    height: usize,
    width: usize,
    count: usize,
    labels: Vec<u32>,
}

impl Segmentation {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(dim_mismatch("segment raster length"));
        }
        let count = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let mut seen = vec![false; count];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        if seen.iter().any(|s| !s) {
            return Err(invalid("segment ids are not contiguous"));
        }
        Ok(Self {
            height,
            width,
            count,
            labels,
        })
    }

    /// Every pixel its own segment.
    pub fn pixels(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            count: height * width,
            labels: (0..(height * width) as u32).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        self.labels.iter().for_each(|&l| sizes[l as usize] += 1);
        sizes
    }

    /// True when each segment forms a single 4-connected component.
    pub fn is_four_connected(&self) -> bool {
        let (comp, _) = components(&self.labels, self.height, self.width);
        let n_comp = comp.iter().max().map_or(0, |&m| m + 1);
        n_comp == self.count
    }
}

// sRGB (D65) → CIELAB constants.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

pub fn rgb_to_lab(rgb: [f32; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(c as f64));
    let mut xyz = [0.0; 3];
    for (r, row) in RGB_TO_XYZ.iter().enumerate() {
        xyz[r] = row.iter().zip(&lin).map(|(a, b)| a * b).sum::<f64>() / WHITE_D65[r];
    }
    let [fx, fy, fz] = xyz.map(lab_f);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Standard SLIC in CIELAB + (row, col) space.
pub fn slic_segment(image: &ImageRaster, cfg: &SlicConfig) -> Result<Segmentation> {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    if cfg.n_segments == 0 || cfg.n_segments > n {
        return Err(invalid(format!(
            "n_segments {} outside 1..={n}",
            cfg.n_segments
        )));
    }
    if !(cfg.compactness.is_finite() && cfg.compactness > 0.0) {
        return Err(invalid("compactness must be positive"));
    }
    let lab: Vec<[f64; 3]> = (0..n)
        .map(|i| rgb_to_lab(image.rgb(i / w, i % w)))
        .collect();
    let step = ((n as f64) / cfg.n_segments as f64).sqrt();

    let ny = ((h as f64 / step).round() as usize).clamp(1, cfg.n_segments);
    let nx = ((w as f64 / step).round() as usize).clamp(1, (cfg.n_segments / ny).max(1));
    let gradient = |u: usize, v: usize| -> f64 {
        let at = |uu: usize, vv: usize| lab[uu * w + vv];
        let (up, down) = (at(u.saturating_sub(1), v), at((u + 1).min(h - 1), v));
        let (left, right) = (at(u, v.saturating_sub(1)), at(u, (v + 1).min(w - 1)));
        (0..3)
            .map(|c| (down[c] - up[c]).powi(2) + (right[c] - left[c]).powi(2))
            .sum()
    };

    // centre state: [L, a, b, row, col]
    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(ny * nx);
    let mut labels = vec![0u32; n];
    for i in 0..ny {
        for j in 0..nx {
            let cu = (((i as f64 + 0.5) * h as f64 / ny as f64) as usize).min(h - 1);
            let cv = (((j as f64 + 0.5) * w as f64 / nx as f64) as usize).min(w - 1);
            let mut best = (gradient(cu, cv), cu, cv);
            for du in -1i64..=1 {
                for dv in -1i64..=1 {
                    let (uu, vv) = (cu as i64 + du, cv as i64 + dv);
                    if uu < 0 || vv < 0 || uu >= h as i64 || vv >= w as i64 {
                        continue;
                    }
                    let g = gradient(uu as usize, vv as usize);
                    if g < best.0 {
                        best = (g, uu as usize, vv as usize);
                    }
                }
            }
            let c = lab[best.1 * w + best.2];
            centers.push([c[0], c[1], c[2], best.1 as f64, best.2 as f64]);
        }
    }
    for u in 0..h {
        for v in 0..w {
            let i = ((u * ny) / h).min(ny - 1);
            let j = ((v * nx) / w).min(nx - 1);
            labels[u * w + v] = (i * nx + j) as u32;
        }
    }

    let spatial_weight = (cfg.compactness / step).powi(2);
    let radius = step.ceil() as i64;
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..cfg.max_iters {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cu, cv) = (c[3].round() as i64, c[4].round() as i64);
            let u_range =
                (cu - radius).max(0) as usize..=((cu + radius).min(h as i64 - 1)) as usize;
            for u in u_range {
                let v_range =
                    (cv - radius).max(0) as usize..=((cv + radius).min(w as i64 - 1)) as usize;
                for v in v_range {
                    let i = u * w + v;
                    let p = lab[i];
                    let d_lab =
                        (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                    let d_xy = (u as f64 - c[3]).powi(2) + (v as f64 - c[4]).powi(2);
                    let d = d_lab + spatial_weight * d_xy;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 5]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let p = lab[i];
            let s = &mut sums[l as usize];
            s[0] += p[0];
            s[1] += p[1];
            s[2] += p[2];
            s[3] += (i / w) as f64;
            s[4] += (i % w) as f64;
            counts[l as usize] += 1;
        }
        for ((c, s), &cnt) in centers.iter_mut().zip(&sums).zip(&counts) {
            if cnt > 0 {
                *c = s.map(|x| x / cnt as f64);
            }
        }
    }

    if cfg.enforce_connectivity {
        labels = merge_orphans(&labels, &lab, h, w);
    }
    Segmentation::new(h, w, relabel_contiguous(&labels))
}

/// 4-connected components of equal labels; returns per-pixel component ids
/// and the label of each component.
fn components(labels: &[u32], h: usize, w: usize) -> (Vec<usize>, Vec<u32>) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut comp_label = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_label.len();
        let l = labels[start];
        comp_label.push(l);
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (u, v) = (i / w, i % w);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == l {
                    comp[j] = id;
                    queue.push_back(j);
                }
            };
            if u > 0 {
                visit(i - w);
            }
            if u + 1 < h {
                visit(i + w);
            }
            if v > 0 {
                visit(i - 1);
            }
            if v + 1 < w {
                visit(i + 1);
            }
        }
    }
    (comp, comp_label)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Keeps the largest component of every label and merges each other
/// (orphan) component into an adjacent region, smallest orphans first. The
/// target is the neighbour with the closest mean colour, ties going to the
/// larger region.
fn merge_orphans(labels: &[u32], lab: &[[f64; 3]], h: usize, w: usize) -> Vec<u32> {
    let (comp, comp_label) = components(labels, h, w);
    let n_comp = comp_label.len();
    let mut size = vec![0usize; n_comp];
    let mut color = vec![[0.0f64; 3]; n_comp];
    for (i, &c) in comp.iter().enumerate() {
        size[c] += 1;
        (0..3).for_each(|k| color[c][k] += lab[i][k]);
    }

    let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_comp];
    for u in 0..h {
        for v in 0..w {
            let a = comp[u * w + v];
            if v + 1 < w {
                let b = comp[u * w + v + 1];
                if a != b {
                    neighbors[a].insert(b);
                    neighbors[b].insert(a);
                }
            }
            if u + 1 < h {
                let b = comp[(u + 1) * w + v];
                if a != b {
                    neighbors[a].insert(b);
                    neighbors[b].insert(a);
                }
            }
        }
    }

    let max_label = comp_label.iter().copied().max().unwrap_or(0) as usize;
    let mut main: Vec<Option<usize>> = vec![None; max_label + 1];
    for c in 0..n_comp {
        let l = comp_label[c] as usize;
        match main[l] {
            Some(m) if size[m] >= size[c] => {}
            _ => main[l] = Some(c),
        }
    }
    let mut orphans: Vec<usize> = (0..n_comp)
        .filter(|&c| main[comp_label[c] as usize] != Some(c))
        .collect();
    orphans.sort_by_key(|&c| (size[c], c));

    let mean = |color: &[[f64; 3]], size: &[usize], r: usize| color[r].map(|x| x / size[r] as f64);
    let mut parent: Vec<usize> = (0..n_comp).collect();
    for o in orphans {
        let ro = find(&mut parent, o);
        let own = mean(&color, &size, ro);
        let adjacent: Vec<usize> = neighbors[ro].iter().copied().collect();
        let mut best: Option<(f64, usize)> = None;
        for nb in adjacent {
            let r = find(&mut parent, nb);
            if r == ro {
                continue;
            }
            let m = mean(&color, &size, r);
            let d: f64 = (0..3).map(|k| (m[k] - own[k]).powi(2)).sum();
            let better = match best {
                None => true,
                Some((bd, b)) => {
                    d < bd
                        || (d == bd
                            && (size[r], std::cmp::Reverse(r)) > (size[b], std::cmp::Reverse(b)))
                }
            };
            if better {
                best = Some((d, r));
            }
        }
        if let Some((_, target)) = best {
            parent[ro] = target;
            size[target] += size[ro];
            let c = color[ro];
            (0..3).for_each(|k| color[target][k] += c[k]);
            let moved = std::mem::take(&mut neighbors[ro]);
            for x in moved {
                if x != target {
                    neighbors[target].insert(x);
                }
            }
        }
    }
    comp.iter()
        .map(|&c| {
            let r = find(&mut parent, c);
            comp_label[r]
        })
        .collect()
}

/// Renumbers ids in order of first appearance (raster scan).
fn relabel_contiguous(labels: &[u32]) -> Vec<u32> {
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut map = vec![u32::MAX; max + 1];
    let mut next = 0u32;
    labels
        .iter()
        .map(|&l| {
            if map[l as usize] == u32::MAX {
                map[l as usize] = next;
                next += 1;
            }
            map[l as usize]
        })
        .collect()
}

/// Graph nodes: one row per segment.
#[derive(Clone, Debug)]
pub struct SuperpixelPartition {
    pub segmentation: Segmentation,
    pub sizes: Vec<usize>,
    /// Mean `(row, col)` of member pixels.
    pub centroids: Vec<[f64; 2]>,
    pub feature_dim: usize,
    /// `N×D`, each row ℓ2-normalised (or all zero when the mean vanished).
    pub embeddings: Vec<f64>,
    pub classes: usize,
    /// `N×C` mean pixel scores.
    pub mean_scores: Vec<f64>,
}

impl SuperpixelPartition {
    pub fn nodes(&self) -> usize {
        self.segmentation.count()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn scores(&self, i: usize) -> &[f64] {
        &self.mean_scores[i * self.classes..(i + 1) * self.classes]
    }

    pub fn has_zero_embedding(&self, i: usize) -> bool {
        self.embedding(i).iter().all(|&x| x == 0.0)
    }
}

pub fn summarize_segments(
    seg: &Segmentation,
    feats: &FeatureMap,
    scores: &ScoreMap,
) -> Result<SuperpixelPartition> {
    let (h, w) = (seg.height, seg.width);
    if (feats.height(), feats.width()) != (h, w) || (scores.height(), scores.width()) != (h, w) {
        return Err(dim_mismatch(
            "segments, features and scores are not aligned",
        ));
    }
    let n = h * w;
    let (count, dim, classes) = (seg.count, feats.channels(), scores.classes());
    let sizes = seg.sizes();
    let mut centroids = vec![[0.0f64; 2]; count];
    let mut emb = vec![0.0f64; count * dim];
    let mut sc = vec![0.0f64; count * classes];
    let (fdata, sdata) = (feats.data(), scores.data());
    for (i, &l) in seg.labels.iter().enumerate() {
        let s = l as usize;
        centroids[s][0] += (i / w) as f64;
        centroids[s][1] += (i % w) as f64;
        for d in 0..dim {
            emb[s * dim + d] += fdata[d * n + i] as f64;
        }
        for c in 0..classes {
            sc[s * classes + c] += sdata[c * n + i] as f64;
        }
    }
    for s in 0..count {
        let k = sizes[s] as f64;
        centroids[s] = centroids[s].map(|x| x / k);
        sc[s * classes..(s + 1) * classes]
            .iter_mut()
            .for_each(|x| *x /= k);
        let row = &mut emb[s * dim..(s + 1) * dim];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    Ok(SuperpixelPartition {
        segmentation: seg.clone(),
        sizes,
        centroids,
        feature_dim: dim,
        embeddings: emb,
        classes,
        mean_scores: sc,
    })
}

pub fn encode_segmentation(seg: &Segmentation) -> Vec<u8> {
    let mut buf = tensorio::encode_header(
        SEGMENT_MAGIC,
        &[seg.count, seg.height, seg.width],
        4 * seg.labels.len(),
    );
    for &l in &seg.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    buf
}

pub fn decode_segmentation(bytes: &[u8]) -> Result<Segmentation> {
    let (dims, payload) = tensorio::decode_header(bytes, SEGMENT_MAGIC, 3)?;
    tensorio::expect_len(payload, 4 * dims[1] * dims[2])?;
    let labels = payload.chunks_exact(4).map(tensorio::read_u32).collect();
    let seg = Segmentation::new(dims[1], dims[2], labels)?;
    if seg.count != dims[0] {
        return Err(invalid(format!(
            "header declares {} segments, payload has {}",
            dims[0], seg.count
        )));
    }
    Ok(seg)
}

pub fn write_segmentation(seg: &Segmentation, path: impl AsRef<Path>) -> Result<()> {
    tensorio::write_bytes(path.as_ref(), &encode_segmentation(seg))
}

pub fn read_segmentation(path: impl AsRef<Path>) -> Result<Segmentation> {
    decode_segmentation(&fs::read(path)?)
}
