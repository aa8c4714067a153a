//! Synthetic scenes with known high-resolution truth.
//!
//! A scene is a Voronoi partition of the image plane whose cells carry random
//! classes. Each class owns a mean embedding (vertices of a regular simplex,
//! so all pairs are equidistant) and a base colour. Dense features and image
//! pixels are the class value plus Gaussian noise; the patch-grid features are
//! block means of the dense features, and the low-resolution product is a
//! majority-pooled, randomly corrupted copy of the truth.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)` with one stream per
//! component (see [`Stream`]), so changing one component's draw count never
//! perturbs another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::tensorio::{FeatureMap, GridMeta, ImageRaster, LabelMap, NODATA};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub patch: usize,
    pub n_regions: usize,
    /// Pairwise Euclidean distance between class mean embeddings.
    pub embed_separation: f64,
    pub embed_noise: f64,
    pub image_noise: f64,
    pub lr_factor: usize,
    pub label_flip_rate: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            classes: 4,
            feature_dim: 16,
            patch: 8,
            n_regions: 24,
            embed_separation: 1.0,
            embed_noise: 0.3,
            image_noise: 0.03,
            lr_factor: 8,
            label_flip_rate: 0.1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid("scene dims must be positive"));
        }
        if self.classes < 2 || self.classes >= NODATA as usize {
            return Err(invalid("scene needs 2..255 classes"));
        }
        if self.feature_dim < self.classes {
            return Err(invalid("feature_dim must be at least the class count"));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(invalid("patch size must divide both scene dims"));
        }
        if self.lr_factor == 0
            || self.height % self.lr_factor != 0
            || self.width % self.lr_factor != 0
        {
            return Err(invalid("lr_factor must divide both scene dims"));
        }
        if self.n_regions == 0 {
            return Err(invalid("n_regions must be positive"));
        }
        let nonneg = [self.embed_separation, self.embed_noise, self.image_noise];
        if nonneg.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(invalid(
                "separation and noise levels must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.label_flip_rate) {
            return Err(invalid("label_flip_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// RNG stream ids, one per generated component.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Regions = 1,
    Colors = 2,
    Features = 3,
    Image = 4,
    Flips = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub image: ImageRaster,
    /// Block means of `dense_features`, `D×(H/p)×(W/p)`.
    pub patch_features: FeatureMap,
    pub dense_features: FeatureMap,
    pub truth: LabelMap,
    pub lr_labels: LabelMap,
    /// `C` rows of length `D`.
    pub class_means: Vec<Vec<f32>>,
    pub class_colors: Vec<[f32; 3]>,
}

/// Vertices of a regular simplex embedded in the first `classes` axes of
/// `R^dim`, scaled so every pair sits `separation` apart.
pub fn class_means(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f32>> {
    let c = classes as f64;
    let unit_norm = ((c - 1.0) / c).sqrt();
    let unit_pair_distance = (2.0 * c / (c - 1.0)).sqrt();
    let scale = separation / unit_pair_distance / unit_norm;
    (0..classes)
        .map(|k| {
            let mut v = vec![0.0f32; dim];
            for (j, x) in v.iter_mut().enumerate().take(classes) {
                let e = if j == k { 1.0 } else { 0.0 };
                *x = ((e - 1.0 / c) * scale) as f32;
            }
            v
        })
        .collect()
}

fn class_colors(classes: usize, rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    let mut colors: Vec<[f32; 3]> = Vec::with_capacity(classes);
    let mut min_dist = 0.35f32;
    let mut attempts = 0;
    while colors.len() < classes {
        let cand = [
            rng.random_range(0.15f32..0.85),
            rng.random_range(0.15f32..0.85),
            rng.random_range(0.15f32..0.85),
        ];
        let ok = colors.iter().all(|c| {
            let d2: f32 = c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= min_dist
        });
        if ok {
            colors.push(cand);
        }
        attempts += 1;
        if attempts % 200 == 0 {
            min_dist *= 0.8;
        }
    }
    colors
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w, c, dim) = (spec.height, spec.width, spec.classes, spec.feature_dim);
    let n = h * w;

    let mut rng = stream_rng(spec.seed, Stream::Regions);
    let seeds: Vec<(f64, f64, u8)> = (0..spec.n_regions)
        .map(|_| {
            let r = rng.random::<f64>() * h as f64;
            let col = rng.random::<f64>() * w as f64;
            let class = rng.random_range(0..c) as u8;
            (r, col, class)
        })
        .collect();
    let mut truth_data = vec![0u8; n];
    for u in 0..h {
        for v in 0..w {
            let (py, px) = (u as f64 + 0.5, v as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u8);
            for &(sy, sx, class) in &seeds {
                let d = (py - sy).powi(2) + (px - sx).powi(2);
                if d < best.0 {
                    best = (d, class);
                }
            }
            truth_data[u * w + v] = best.1;
        }
    }
    let truth = LabelMap::new(c, h, w, truth_data)?;

    let colors = class_colors(c, &mut stream_rng(spec.seed, Stream::Colors));
    let means = class_means(c, dim, spec.embed_separation);

    let mut rng = stream_rng(spec.seed, Stream::Features);
    let mut dense = vec![0.0f32; dim * n];
    for i in 0..n {
        let mean = &means[truth.data()[i] as usize];
        for d in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            dense[d * n + i] = (mean[d] as f64 + spec.embed_noise * z) as f32;
        }
    }
    let dense_features = FeatureMap::new(dim, h, w, dense)?;
    let patch_features = block_mean_features(&dense_features, spec.patch)?;

    let mut rng = stream_rng(spec.seed, Stream::Image);
    let mut pixels = vec![0.0f32; 3 * n];
    for i in 0..n {
        let base = colors[truth.data()[i] as usize];
        for ch in 0..3 {
            let z: f64 = rng.sample(StandardNormal);
            pixels[ch * n + i] = (base[ch] as f64 + spec.image_noise * z).clamp(0.0, 1.0) as f32;
        }
    }
    let image = ImageRaster::new(h, w, pixels)?;

    let pooled = majority_downsample(&truth, spec.lr_factor)?;
    let mut rng = stream_rng(spec.seed, Stream::Flips);
    let mut lr = pooled.into_data();
    for cell in lr.iter_mut() {
        let flip = rng.random::<f64>() < spec.label_flip_rate;
        let offset = rng.random_range(1..c) as u8;
        if flip && *cell != NODATA {
            *cell = ((*cell as usize + offset as usize) % c) as u8;
        }
    }
    let lr_labels = LabelMap::new(c, h / spec.lr_factor, w / spec.lr_factor, lr)?;

    Ok(Scene {
        image,
        patch_features,
        dense_features,
        truth,
        lr_labels,
        class_means: means,
        class_colors: colors,
    })
}

/// Block-mean pooling of a dense feature map into a `p×p` patch grid.
pub fn block_mean_features(dense: &FeatureMap, patch: usize) -> Result<FeatureMap> {
    let (dim, h, w) = (dense.channels(), dense.height(), dense.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(invalid(format!("patch {patch} does not divide {h}×{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = vec![0.0f32; dim * gh * gw];
    let inv = 1.0 / (patch * patch) as f64;
    for d in 0..dim {
        for i in 0..gh {
            for j in 0..gw {
                let mut acc = 0.0f64;
                for u in i * patch..(i + 1) * patch {
                    for v in j * patch..(j + 1) * patch {
                        acc += dense.get(d, u, v) as f64;
                    }
                }
                out[d * gh * gw + i * gw + j] = (acc * inv) as f32;
            }
        }
    }
    Ok(FeatureMap::new(dim, gh, gw, out)?.with_grid(GridMeta {
        patch,
        grid_height: gh,
        grid_width: gw,
    }))
}

/// Modal class of each `factor×factor` block; ties go to the lowest class,
/// nodata does not vote, all-nodata blocks stay nodata.
pub fn majority_downsample(labels: &LabelMap, factor: usize) -> Result<LabelMap> {
    let (h, w) = (labels.height(), labels.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(invalid(format!("factor {factor} does not divide {h}×{w}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut counts = vec![0usize; labels.classes()];
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            counts.iter_mut().for_each(|x| *x = 0);
            for u in i * factor..(i + 1) * factor {
                for v in j * factor..(j + 1) * factor {
                    let l = labels.get(u, v);
                    if l != NODATA {
                        counts[l as usize] += 1;
                    }
                }
            }
            out.push(modal_class(&counts).map_or(NODATA, |c| c as u8));
        }
    }
    LabelMap::new(labels.classes(), oh, ow, out)
}

/// Index of the largest count, lowest index on ties; `None` when all zero.
pub(crate) fn modal_class(counts: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 && best.is_none_or(|(_, bn)| n > bn) {
            best = Some((c, n));
        }
    }
    best.map(|(c, _)| c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            height: 32,
            width: 32,
            n_regions: 6,
            seed,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn majority_examples() {
        let clear = LabelMap::new(3, 2, 2, vec![0, 0, 1, 2]).unwrap();
        assert_eq!(majority_downsample(&clear, 2).unwrap().data(), &[0]);
        let tie = LabelMap::new(2, 2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(majority_downsample(&tie, 2).unwrap().data(), &[0]);
        let any = LabelMap::new(3, 2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        assert_eq!(majority_downsample(&any, 1).unwrap(), any);
        assert!(majority_downsample(&any, 2).is_err());
    }

    #[test]
    fn degenerate_degradation_is_identity() {
        let spec = SceneSpec {
            embed_noise: 0.0,
            label_flip_rate: 0.0,
            lr_factor: 1,
            ..small_spec(3)
        };
        let scene = generate_scene(&spec).unwrap();
        assert_eq!(scene.lr_labels, scene.truth);
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&small_spec(11)).unwrap();
        let b = generate_scene(&small_spec(11)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.dense_features, b.dense_features);
        assert_eq!(a.patch_features, b.patch_features);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.lr_labels, b.lr_labels);
        let c = generate_scene(&small_spec(12)).unwrap();
        assert_ne!(a.dense_features, c.dense_features);
    }

    #[test]
    fn class_means_are_equidistant() {
        for classes in 2..6 {
            let means = class_means(classes, 8, 1.7);
            for a in 0..classes {
                for b in a + 1..classes {
                    let d: f64 = means[a]
                        .iter()
                        .zip(&means[b])
                        .map(|(x, y)| ((x - y) as f64).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!((d - 1.7).abs() < 1e-6, "{classes} {a} {b} {d}");
                }
            }
        }
    }

    #[test]
    fn noiseless_features_equal_class_means() {
        let spec = SceneSpec {
            embed_noise: 0.0,
            ..small_spec(5)
        };
        let scene = generate_scene(&spec).unwrap();
        let mut px = vec![0.0; spec.feature_dim];
        for i in 0..scene.truth.pixels() {
            scene.dense_features.pixel_into(i, &mut px);
            assert_eq!(px, scene.class_means[scene.truth.data()[i] as usize]);
        }
    }

    #[test]
    fn flips_change_about_the_requested_fraction() {
        let spec = SceneSpec {
            height: 256,
            width: 256,
            lr_factor: 4,
            label_flip_rate: 0.3,
            ..small_spec(9)
        };
        let scene = generate_scene(&spec).unwrap();
        let pooled = majority_downsample(&scene.truth, 4).unwrap();
        let flipped = pooled
            .data()
            .iter()
            .zip(scene.lr_labels.data())
            .filter(|(a, b)| a != b)
            .count() as f64;
        let rate = flipped / pooled.pixels() as f64;
        assert!((rate - 0.3).abs() < 0.03, "rate {rate}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_scene(&SceneSpec {
            patch: 5,
            ..small_spec(0)
        })
        .is_err());
        assert!(generate_scene(&SceneSpec {
            lr_factor: 3,
            ..small_spec(0)
        })
        .is_err());
        assert!(generate_scene(&SceneSpec {
            label_flip_rate: 1.0,
            ..small_spec(0)
        })
        .is_err());
        assert!(generate_scene(&SceneSpec {
            embed_noise: -1.0,
            ..small_spec(0)
        })
        .is_err());
        assert!(generate_scene(&SceneSpec {
            feature_dim: 2,
            ..small_spec(0)
        })
        .is_err());
    }
}
