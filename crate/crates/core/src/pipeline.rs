//! End-to-end orchestration: upsample → probe → prompts → cosine scores →
//! per-chip superpixel graph refinement → mosaic → optional evaluation.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;

use crate::classify::{argmax_labels, cosine_scores, kmeans_voting_baseline, KMeansConfig};
use crate::error::{dim_mismatch, invalid, Error, Result};
use crate::eval::{accumulate_confusion, miou, ConfusionMatrix, IouReport};
use crate::graph::{build_graph, refine_labels, GraphConfig};
use crate::probe::{probe_predict, train_probe, upsample_labels_nn, ProbeTrainConfig};
use crate::prompts::{build_prompts, oracle_prompts, PromptSet};
use crate::superpixel::{slic_segment, summarize_segments, Segmentation, SlicConfig};
use crate::tensorio::{FeatureMap, ImageRaster, LabelMap, ScoreMap};
use crate::upsample::{infer_patch, upsample_features, UpsampleConfig, UpsampleMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    ProbeAgreement,
    OracleHr,
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe_agreement" => Ok(Self::ProbeAgreement),
            "oracle_hr" => Ok(Self::OracleHr),
            other => Err(invalid(format!("unknown prompt mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelinePaths {
    pub image: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub lr_labels: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    /// Directory holding an HR-labelled tile for oracle prompts.
    pub oracle_dir: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    pub chip_size: usize,
    pub upsample: UpsampleConfig,
    pub probe: ProbeTrainConfig,
    pub slic: SlicConfig,
    pub graph: GraphConfig,
    pub kmeans: KMeansConfig,
    pub graph_refine: bool,
    pub superpixel: bool,
    pub prompt_mode: PromptMode,
    pub absent_as_zero: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PipelinePaths::default(),
            chip_size: 448,
            upsample: UpsampleConfig::default(),
            probe: ProbeTrainConfig::default(),
            slic: SlicConfig::default(),
            graph: GraphConfig::default(),
            kmeans: KMeansConfig::default(),
            graph_refine: true,
            superpixel: true,
            prompt_mode: PromptMode::ProbeAgreement,
            absent_as_zero: false,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(invalid(format!("bad boolean {value:?} for {key}"))),
    }
}

impl PipelineConfig {
    /// Sets one dotted key. `seed` also reseeds the probe and k-means.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.probe.seed = self.seed;
                self.kmeans.seed = self.seed;
            }
            "chip_size" => self.chip_size = parse(key, value)?,
            "prompt_mode" => self.prompt_mode = value.parse()?,
            "stages.upsample_mode" | "upsample.mode" => self.upsample.mode = value.parse()?,
            "stages.graph_refine" => self.graph_refine = parse_bool(key, value)?,
            "stages.superpixel" => self.superpixel = parse_bool(key, value)?,
            "upsample.window_radius" => self.upsample.window_radius = parse(key, value)?,
            "upsample.color_bandwidth" => self.upsample.color_bandwidth = parse(key, value)?,
            "upsample.spatial_bandwidth" => self.upsample.spatial_bandwidth = parse(key, value)?,
            "probe.learning_rate" => self.probe.learning_rate = parse(key, value)?,
            "probe.epochs" => self.probe.epochs = parse(key, value)?,
            "probe.batch_pixels" => {
                self.probe.batch_pixels = if value == "full" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "probe.seed" => self.probe.seed = parse(key, value)?,
            "probe.l2_reg" => self.probe.l2_reg = parse(key, value)?,
            "slic.n_segments" => self.slic.n_segments = parse(key, value)?,
            "slic.compactness" => self.slic.compactness = parse(key, value)?,
            "slic.max_iters" => self.slic.max_iters = parse(key, value)?,
            "slic.enforce_connectivity" => self.slic.enforce_connectivity = parse_bool(key, value)?,
            "graph.k" => self.graph.k = parse(key, value)?,
            "graph.gamma" => self.graph.gamma = parse(key, value)?,
            "graph.sigma" => self.graph.sigma = parse(key, value)?,
            "graph.q" | "graph.spatial_exponent" => {
                self.graph.spatial_exponent = parse(key, value)?
            }
            "graph.alpha" => self.graph.alpha = parse(key, value)?,
            "graph.tol" => self.graph.tol = parse(key, value)?,
            "graph.max_prop_iters" => self.graph.max_prop_iters = parse(key, value)?,
            "graph.solver" => self.graph.solver = value.parse()?,
            "kmeans.k" => self.kmeans.k = parse(key, value)?,
            "kmeans.max_iters" => self.kmeans.max_iters = parse(key, value)?,
            "kmeans.seed" => self.kmeans.seed = parse(key, value)?,
            "kmeans.tol" => self.kmeans.tol = parse(key, value)?,
            "eval.absent_as_zero" => self.absent_as_zero = parse_bool(key, value)?,
            "paths.image" => self.paths.image = Some(value.into()),
            "paths.features" => self.paths.features = Some(value.into()),
            "paths.lr_labels" => self.paths.lr_labels = Some(value.into()),
            "paths.truth" => self.paths.truth = Some(value.into()),
            "paths.oracle_dir" => self.paths.oracle_dir = Some(value.into()),
            "paths.output" => self.paths.output = Some(value.into()),
            other => return Err(invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| invalid(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chip_size == 0 {
            return Err(invalid("chip_size must be positive"));
        }
        if self.superpixel && !self.graph_refine {
            return Err(invalid("stages.superpixel requires stages.graph_refine"));
        }
        self.upsample.validate()?;
        self.probe.validate()?;
        self.graph.validate()?;
        Ok(())
    }
}

/// Pipeline stage names used to tag errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Upsample,
    Probe,
    Prompts,
    Predict,
    Superpixel,
    Refine,
    Mosaic,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Upsample => "upsample",
            Stage::Probe => "probe",
            Stage::Prompts => "prompts",
            Stage::Predict => "predict",
            Stage::Superpixel => "superpixel",
            Stage::Refine => "refine",
            Stage::Mosaic => "mosaic",
            Stage::Eval => "eval",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage}: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Window of a raster, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChipRect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

/// Non-overlapping tiling; chips on the last row/column are truncated.
pub fn chip_grid(height: usize, width: usize, chip: usize) -> Vec<ChipRect> {
    assert!(chip > 0, "chip size must be positive");
    let mut out = Vec::new();
    for row in (0..height).step_by(chip) {
        for col in (0..width).step_by(chip) {
            out.push(ChipRect {
                row,
                col,
                height: chip.min(height - row),
                width: chip.min(width - col),
            });
        }
    }
    out
}

/// Plane-major rasters that can be cropped and reassembled.
pub trait Raster: Sized {
    type Elem: Copy + Default;
    fn planes(&self) -> usize;
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn values(&self) -> &[Self::Elem];
    /// Same kind and metadata as `self`, new extent and values.
    fn rebuild(&self, rows: usize, cols: usize, values: Vec<Self::Elem>) -> Result<Self>;
}

impl Raster for FeatureMap {
    type Elem = f32;
    fn planes(&self) -> usize {
        self.channels()
    }
    fn rows(&self) -> usize {
        self.height()
    }
    fn cols(&self) -> usize {
        self.width()
    }
    fn values(&self) -> &[f32] {
        self.data()
    }
    fn rebuild(&self, rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        FeatureMap::new(self.channels(), rows, cols, values)
    }
}

impl Raster for ScoreMap {
    type Elem = f32;
    fn planes(&self) -> usize {
        self.classes()
    }
    fn rows(&self) -> usize {
        self.height()
    }
    fn cols(&self) -> usize {
        self.width()
    }
    fn values(&self) -> &[f32] {
        self.data()
    }
    fn rebuild(&self, rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        ScoreMap::new(self.classes(), rows, cols, values)
    }
}

impl Raster for LabelMap {
    type Elem = u8;
    fn planes(&self) -> usize {
        1
    }
    fn rows(&self) -> usize {
        self.height()
    }
    fn cols(&self) -> usize {
        self.width()
    }
    fn values(&self) -> &[u8] {
        self.data()
    }
    fn rebuild(&self, rows: usize, cols: usize, values: Vec<u8>) -> Result<Self> {
        LabelMap::new(self.classes(), rows, cols, values)
    }
}

impl Raster for ImageRaster {
    type Elem = f32;
    fn planes(&self) -> usize {
        3
    }
    fn rows(&self) -> usize {
        self.height()
    }
    fn cols(&self) -> usize {
        self.width()
    }
    fn values(&self) -> &[f32] {
        self.data()
    }
    fn rebuild(&self, rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        ImageRaster::new(rows, cols, values)
    }
}

pub fn crop<R: Raster>(raster: &R, rect: ChipRect) -> Result<R> {
    let (h, w) = (raster.rows(), raster.cols());
    if rect.height == 0
        || rect.width == 0
        || rect.row + rect.height > h
        || rect.col + rect.width > w
    {
        return Err(dim_mismatch(format!("chip {rect:?} outside {h}×{w}")));
    }
    let src = raster.values();
    let mut out = Vec::with_capacity(raster.planes() * rect.height * rect.width);
    for p in 0..raster.planes() {
        for u in rect.row..rect.row + rect.height {
            let start = p * h * w + u * w + rect.col;
            out.extend_from_slice(&src[start..start + rect.width]);
        }
    }
    raster.rebuild(rect.height, rect.width, out)
}

pub fn split_chips<R: Raster>(raster: &R, chip: usize) -> Result<Vec<(ChipRect, R)>> {
    if chip == 0 {
        return Err(invalid("chip size must be positive"));
    }
    chip_grid(raster.rows(), raster.cols(), chip)
        .into_iter()
        .map(|r| Ok((r, crop(raster, r)?)))
        .collect()
}

/// Reassembles chips into an `height×width` raster; chips must tile it.
pub fn mosaic<R: Raster>(height: usize, width: usize, chips: &[(ChipRect, R)]) -> Result<R> {
    let first = &chips
        .first()
        .ok_or_else(|| invalid("no chips to mosaic"))?
        .1;
    let planes = first.planes();
    let mut out = vec![R::Elem::default(); planes * height * width];
    let mut covered = vec![false; height * width];
    for (rect, chip) in chips {
        if chip.planes() != planes || chip.rows() != rect.height || chip.cols() != rect.width {
            return Err(dim_mismatch(format!("chip {rect:?} has mismatched extent")));
        }
        if rect.row + rect.height > height || rect.col + rect.width > width {
            return Err(dim_mismatch(format!(
                "chip {rect:?} outside {height}×{width}"
            )));
        }
        let src = chip.values();
        for u in 0..rect.height {
            for v in 0..rect.width {
                let idx = (rect.row + u) * width + rect.col + v;
                if covered[idx] {
                    return Err(invalid("chips overlap"));
                }
                covered[idx] = true;
            }
        }
        for p in 0..planes {
            for u in 0..rect.height {
                let dst = p * height * width + (rect.row + u) * width + rect.col;
                let s = p * rect.height * rect.width + u * rect.width;
                out[dst..dst + rect.width].copy_from_slice(&src[s..s + rect.width]);
            }
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(invalid("chips do not cover the mosaic"));
    }
    first.rebuild(height, width, out)
}

/// A tile with high-resolution labels used to estimate oracle prompts.
#[derive(Clone, Copy, Debug)]
pub struct OracleTile<'a> {
    pub image: &'a ImageRaster,
    pub features: &'a FeatureMap,
    pub truth: &'a LabelMap,
}

#[derive(Clone, Copy, Debug)]
pub struct PipelineInputs<'a> {
    pub image: &'a ImageRaster,
    /// Patch-grid features, or dense features already at image resolution.
    pub features: &'a FeatureMap,
    pub lr_labels: &'a LabelMap,
    pub truth: Option<&'a LabelMap>,
    pub oracle: Option<OracleTile<'a>>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub labels: LabelMap,
    pub initial_labels: LabelMap,
    pub scores: ScoreMap,
    pub prompts: PromptSet,
    pub probe_loss_history: Option<Vec<f64>>,
    pub chips: usize,
    pub confusion: Option<ConfusionMatrix>,
    pub report: Option<IouReport>,
}

/// Features at image resolution: upsampled from a patch grid, or passed
/// through when already dense.
pub fn dense_features(
    features: &FeatureMap,
    image: &ImageRaster,
    cfg: &UpsampleConfig,
) -> Result<FeatureMap> {
    if (features.height(), features.width()) == (image.height(), image.width()) {
        return Ok(features.clone());
    }
    upsample_features(features, image, cfg)
}

/// Segment count for one chip: the configured count scaled by the chip's
/// share of the full image, at least 1.
pub fn chip_segments(n_segments: usize, chip_pixels: usize, total_pixels: usize) -> usize {
    let scaled = (n_segments as f64 * chip_pixels as f64 / total_pixels as f64).round() as usize;
    scaled.clamp(1, chip_pixels)
}

/// Refines one chip; chips with fewer than two nodes keep the initial labels.
pub fn refine_chip(
    image: &ImageRaster,
    feats: &FeatureMap,
    scores: &ScoreMap,
    initial: &LabelMap,
    cfg: &PipelineConfig,
    total_pixels: usize,
) -> std::result::Result<LabelMap, StageError> {
    let seg = if cfg.superpixel {
        let slic = SlicConfig {
            n_segments: chip_segments(cfg.slic.n_segments, image.pixels(), total_pixels),
            ..cfg.slic.clone()
        };
        slic_segment(image, &slic).at(Stage::Superpixel)?
    } else {
        Segmentation::pixels(image.height(), image.width())
    };
    if seg.count() < 2 {
        return Ok(initial.clone());
    }
    let part = summarize_segments(&seg, feats, scores).at(Stage::Superpixel)?;
    let graph = build_graph(&part, &cfg.graph).at(Stage::Refine)?;
    Ok(refine_labels(&part, &graph, &cfg.graph)
        .at(Stage::Refine)?
        .labels)
}

pub fn run_pipeline(
    inputs: &PipelineInputs<'_>,
    cfg: &PipelineConfig,
) -> std::result::Result<PipelineOutput, StageError> {
    cfg.validate().at(Stage::Config)?;
    let (h, w) = (inputs.image.height(), inputs.image.width());
    if (inputs.features.height(), inputs.features.width()) != (h, w) {
        let patch = infer_patch(inputs.features.height(), inputs.features.width(), h, w)
            .at(Stage::Upsample)?;
        if cfg.chip_size < 2 * patch {
            return Err(invalid(format!(
                "chip_size {} below twice the patch size {patch}",
                cfg.chip_size
            )))
            .at(Stage::Config);
        }
    }
    let feats = dense_features(inputs.features, inputs.image, &cfg.upsample).at(Stage::Upsample)?;
    let lr_up = upsample_labels_nn(inputs.lr_labels, h, w).at(Stage::Probe)?;

    let (prompts, history) = match cfg.prompt_mode {
        PromptMode::ProbeAgreement => {
            let trained = train_probe(&feats, &lr_up, &cfg.probe).at(Stage::Probe)?;
            let pred = probe_predict(&trained.probe, &feats).at(Stage::Probe)?;
            (
                build_prompts(&feats, &pred, &lr_up).at(Stage::Prompts)?,
                Some(trained.loss_history),
            )
        }
        PromptMode::OracleHr => {
            let tile = inputs
                .oracle
                .ok_or_else(|| invalid("oracle prompts need an HR-labelled tile"))
                .at(Stage::Prompts)?;
            let tile_feats =
                dense_features(tile.features, tile.image, &cfg.upsample).at(Stage::Upsample)?;
            (
                oracle_prompts(&tile_feats, tile.truth).at(Stage::Prompts)?,
                None,
            )
        }
    };
    if prompts.classes() != inputs.lr_labels.classes() {
        return Err(dim_mismatch("prompt and label class counts differ")).at(Stage::Prompts);
    }

    let scores = cosine_scores(&feats, &prompts).at(Stage::Predict)?;
    let initial = argmax_labels(&scores);

    let (labels, chips) = if cfg.graph_refine {
        let rects = chip_grid(h, w, cfg.chip_size);
        let total = h * w;
        let refined: Vec<(ChipRect, LabelMap)> = rects
            .par_iter()
            .map(|&rect| {
                let image = crop(inputs.image, rect).at(Stage::Mosaic)?;
                let f = crop(&feats, rect).at(Stage::Mosaic)?;
                let s = crop(&scores, rect).at(Stage::Mosaic)?;
                let init = crop(&initial, rect).at(Stage::Mosaic)?;
                Ok((rect, refine_chip(&image, &f, &s, &init, cfg, total)?))
            })
            .collect::<std::result::Result<_, StageError>>()?;
        (mosaic(h, w, &refined).at(Stage::Mosaic)?, rects.len())
    } else {
        (initial.clone(), 0)
    };

    let (confusion, report) = match inputs.truth {
        Some(truth) => {
            let cm = accumulate_confusion(&labels, truth, ConfusionMatrix::new(truth.classes()))
                .at(Stage::Eval)?;
            let report = miou(&cm, cfg.absent_as_zero).at(Stage::Eval)?;
            (Some(cm), Some(report))
        }
        None => (None, None),
    };

    Ok(PipelineOutput {
        labels,
        initial_labels: initial,
        scores,
        prompts,
        probe_loss_history: history,
        chips,
        confusion,
        report,
    })
}

/// K-means + voting on the same dense features the pipeline would use.
pub fn run_kmeans_baseline(
    inputs: &PipelineInputs<'_>,
    cfg: &PipelineConfig,
) -> std::result::Result<LabelMap, StageError> {
    let feats = dense_features(inputs.features, inputs.image, &cfg.upsample).at(Stage::Upsample)?;
    let lr_up = upsample_labels_nn(
        inputs.lr_labels,
        inputs.image.height(),
        inputs.image.width(),
    )
    .at(Stage::Probe)?;
    kmeans_voting_baseline(&feats, &lr_up, &cfg.kmeans).at(Stage::Predict)
}

/// Stage toggles for ablation runs: upsampling, refinement, superpixels.
pub fn ablation_config(
    base: &PipelineConfig,
    upsample: bool,
    refine: bool,
    superpixel: bool,
) -> PipelineConfig {
    let mut cfg = base.clone();
    cfg.upsample.mode = if upsample {
        UpsampleMode::Attention
    } else {
        UpsampleMode::Nearest
    };
    cfg.graph_refine = refine;
    cfg.superpixel = refine && superpixel;
    cfg
}
