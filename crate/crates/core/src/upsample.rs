//! Guided densification of patch-grid features to pixel resolution.
//!
//! In attention mode every output pixel is a softmax-weighted combination of
//! the low-resolution feature cells in a `(2r+1)²` window around its home
//! cell. The query is the pixel's colour, the key of a cell is the mean colour
//! of that cell's `p×p` image block, and the logit also carries a Gaussian
//! spatial penalty on the distance to the cell centre. Values are the
//! low-resolution feature vectors themselves.

use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{dim_mismatch, invalid, Error, Result};
use crate::tensorio::{FeatureMap, GridMeta, ImageRaster};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Attention,
    Bilinear,
    Nearest,
}

impl FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "bilinear" => Ok(Self::Bilinear),
            "nearest" => Ok(Self::Nearest),
            other => Err(invalid(format!("unknown upsample mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Attention => "attention",
            Self::Bilinear => "bilinear",
            Self::Nearest => "nearest",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpsampleConfig {
    pub window_radius: usize,
    pub color_bandwidth: f64,
    pub spatial_bandwidth: f64,
    pub mode: UpsampleMode,
}

impl Default for UpsampleConfig {
    fn default() -> Self {
        Self {
            window_radius: 3,
            color_bandwidth: 0.05,
            spatial_bandwidth: 2.0,
            mode: UpsampleMode::Attention,
        }
    }
}

impl UpsampleConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.color_bandwidth) || !ok(self.spatial_bandwidth) {
            return Err(invalid("upsample bandwidths must be positive and finite"));
        }
        Ok(())
    }
}

/// Per-block channel means of an image, `3×(H/p)×(W/p)`.
pub fn block_mean_colors(image: &ImageRaster, patch: usize) -> Result<FeatureMap> {
    let (h, w) = (image.height(), image.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid(format!("patch {patch} does not divide {h}×{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let inv = 1.0 / (patch * patch) as f64;
    let mut out = vec![0.0f32; 3 * gh * gw];
    for c in 0..3 {
        for i in 0..gh {
            for j in 0..gw {
                let mut acc = 0.0f64;
                for u in i * patch..(i + 1) * patch {
                    for v in j * patch..(j + 1) * patch {
                        acc += image.get(c, u, v) as f64;
                    }
                }
                out[c * gh * gw + i * gw + j] = (acc * inv) as f32;
            }
        }
    }
    Ok(FeatureMap::new(3, gh, gw, out)?.with_grid(GridMeta {
        patch,
        grid_height: gh,
        grid_width: gw,
    }))
}

/// Patch size implied by a `grid_h×grid_w` grid on an `h×w` image.
pub fn infer_patch(grid_h: usize, grid_w: usize, h: usize, w: usize) -> Result<usize> {
    if grid_h == 0 || grid_w == 0 || h % grid_h != 0 || w % grid_w != 0 || h / grid_h != w / grid_w
    {
        return Err(dim_mismatch(format!(
            "{grid_h}×{grid_w} grid does not tile a {h}×{w} image evenly"
        )));
    }
    Ok(h / grid_h)
}

/// A single `(cell_row, cell_col, weight)` contribution to an output pixel.
pub type CellWeight = (usize, usize, f64);

/// Precomputed state for attention weights on one image.
pub struct AttentionField<'a> {
    image: &'a ImageRaster,
    keys: FeatureMap,
    patch: usize,
    cfg: UpsampleConfig,
}

impl<'a> AttentionField<'a> {
    pub fn new(image: &'a ImageRaster, patch: usize, cfg: UpsampleConfig) -> Result<Self> {
        cfg.validate()?;
        let keys = block_mean_colors(image, patch)?;
        Ok(Self {
            image,
            keys,
            patch,
            cfg,
        })
    }

    /// Softmax weights for pixel `(u, v)` over its clamped window.
    pub fn weights(&self, u: usize, v: usize, out: &mut Vec<CellWeight>) {
        out.clear();
        let p = self.patch;
        let (gh, gw) = (self.keys.height(), self.keys.width());
        let (i0, j0) = (u / p, v / p);
        let r = self.cfg.window_radius;
        let q = self.image.rgb(u, v);
        let half = (p as f64 - 1.0) / 2.0;
        let spatial_scale = self.cfg.spatial_bandwidth * (p * p) as f64;
        let mut max_logit = f64::NEG_INFINITY;
        for i in i0.saturating_sub(r)..=(i0 + r).min(gh - 1) {
            for j in j0.saturating_sub(r)..=(j0 + r).min(gw - 1) {
                let color: f64 = (0..3)
                    .map(|c| {
                        let diff = q[c] as f64 - self.keys.get(c, i, j) as f64;
                        diff * diff
                    })
                    .sum();
                let dy = u as f64 - (i * p) as f64 - half;
                let dx = v as f64 - (j * p) as f64 - half;
                let logit = -color / self.cfg.color_bandwidth - (dy * dy + dx * dx) / spatial_scale;
                max_logit = max_logit.max(logit);
                out.push((i, j, logit));
            }
        }
        let mut total = 0.0;
        for cw in out.iter_mut() {
            cw.2 = (cw.2 - max_logit).exp();
            total += cw.2;
        }
        for cw in out.iter_mut() {
            cw.2 /= total;
        }
    }
}

/// Interpolation weights of the bilinear mode, cell centres aligned to
/// `i·p + (p−1)/2`.
pub fn bilinear_weights(
    u: usize,
    v: usize,
    patch: usize,
    grid_h: usize,
    grid_w: usize,
    out: &mut Vec<CellWeight>,
) {
    out.clear();
    let half = (patch as f64 - 1.0) / 2.0;
    let axis = |x: usize, n: usize| -> (usize, usize, f64) {
        let t = ((x as f64 - half) / patch as f64).clamp(0.0, (n - 1) as f64);
        let lo = t.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, t - lo as f64)
    };
    let (i0, i1, ty) = axis(u, grid_h);
    let (j0, j1, tx) = axis(v, grid_w);
    for (i, wy) in [(i0, 1.0 - ty), (i1, ty)] {
        for (j, wx) in [(j0, 1.0 - tx), (j1, tx)] {
            let w = wy * wx;
            if w > 0.0 {
                out.push((i, j, w));
            }
        }
    }
    if out.is_empty() {
        out.push((i0, j0, 1.0));
    }
}

/// Densifies `f_lr` (`D×h_p×w_p`) to the resolution of `image` (`3×H×W`).
pub fn upsample_features(
    f_lr: &FeatureMap,
    image: &ImageRaster,
    cfg: &UpsampleConfig,
) -> Result<FeatureMap> {
    cfg.validate()?;
    let (h, w) = (image.height(), image.width());
    let (gh, gw) = (f_lr.height(), f_lr.width());
    let patch = infer_patch(gh, gw, h, w)?;
    let dim = f_lr.channels();
    let cells = f_lr.to_pixel_major();
    let field = match cfg.mode {
        UpsampleMode::Attention => Some(AttentionField::new(image, patch, *cfg)?),
        _ => None,
    };

    let mut rows = vec![0.0f32; h * w * dim];
    rows.par_chunks_mut(w * dim)
        .enumerate()
        .for_each(|(u, row)| {
            let mut weights = Vec::with_capacity((2 * cfg.window_radius + 1).pow(2));
            let mut acc = vec![0.0f64; dim];
            for v in 0..w {
                match (&field, cfg.mode) {
                    (Some(field), _) => field.weights(u, v, &mut weights),
                    (None, UpsampleMode::Bilinear) => {
                        bilinear_weights(u, v, patch, gh, gw, &mut weights)
                    }
                    _ => {
                        weights.clear();
                        weights.push((u / patch, v / patch, 1.0));
                    }
                }
                acc.iter_mut().for_each(|x| *x = 0.0);
                for &(i, j, a) in &weights {
                    let cell = &cells[(i * gw + j) * dim..(i * gw + j + 1) * dim];
                    for (s, &x) in acc.iter_mut().zip(cell) {
                        *s += a * x as f64;
                    }
                }
                for (o, &s) in row[v * dim..(v + 1) * dim].iter_mut().zip(&acc) {
                    *o = s as f32;
                }
            }
        });
    FeatureMap::from_pixel_major(dim, h, w, &rows)
}
