use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use landsr_core::classify::{argmax_labels, cosine_scores, kmeans_voting_baseline, KMeansConfig};
use landsr_core::eval::{accumulate_confusion, miou, ConfusionMatrix};
use landsr_core::graph::{build_graph, refine_labels, GraphConfig, Solver};
use landsr_core::pipeline::{run_pipeline, OracleTile, PipelineConfig, PipelineInputs};
use landsr_core::probe::{
    probe_predict, read_probe, train_probe, upsample_labels_nn, write_probe, ProbeTrainConfig,
};
use landsr_core::prompts::{average_prompt_sets, read_prompts, write_prompts, PromptAccumulator};
use landsr_core::superpixel::{
    read_segmentation, slic_segment, summarize_segments, write_segmentation, SlicConfig,
};
use landsr_core::synth::{generate_scene, SceneSpec};
use landsr_core::tensorio::{
    default_palette, read_feature_map, read_image, read_label_map, read_score_map, write_colormap,
    write_feature_map, write_image, write_label_map, write_score_map, LabelMap,
};
use landsr_core::upsample::{upsample_features, UpsampleConfig, UpsampleMode};

/// File names used by `synth` and by oracle tile directories.
const IMAGE_FILE: &str = "image.ppm";
const FEATURES_FILE: &str = "features.msrf";
const DENSE_FILE: &str = "dense.msrf";
const TRUTH_FILE: &str = "truth.msrl";
const LR_FILE: &str = "lr.msrl";

#[derive(Parser)]
#[command(
    name = "landsr",
    version,
    about = "Sharpen coarse land-cover labels into a high-resolution map"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with known high-resolution truth.
    Synth(SynthArgs),
    /// Upsample patch-grid features to image resolution.
    Upsample(UpsampleArgs),
    /// Train the linear probe on coarse labels.
    Probe(ProbeArgs),
    /// Build class prompts from probe/label agreement or from reference labels.
    Prompts(PromptsArgs),
    /// Cosine scores and initial labels from features and prompts.
    Predict(PredictArgs),
    /// SLIC superpixels of an image.
    Superpixel(SuperpixelArgs),
    /// Graph-based refinement of pixel scores over superpixels.
    Refine(RefineArgs),
    /// Confusion matrix and IoU of a label map against truth.
    Eval(EvalArgs),
    /// K-means clustering with majority voting against coarse labels.
    BaselineKmeans(BaselineArgs),
    /// Whole pipeline from a config file; trailing `--section.key value` pairs override it.
    Run(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 24)]
    regions: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.3)]
    embed_noise: f64,
    #[arg(long, default_value_t = 0.03)]
    image_noise: f64,
    #[arg(long, default_value_t = 8)]
    lr_factor: usize,
    #[arg(long, default_value_t = 0.1)]
    flip_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct UpsampleArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = UpsampleMode::Attention)]
    mode: UpsampleMode,
    /// Window radius in grid cells.
    #[arg(long, default_value_t = 3)]
    radius: usize,
    /// Colour bandwidth.
    #[arg(long, default_value_t = 0.05)]
    tau_c: f64,
    /// Spatial bandwidth, in units of squared patch size.
    #[arg(long, default_value_t = 2.0)]
    tau_s: f64,
}

#[derive(Args)]
struct ProbeArgs {
    /// Features at label resolution (upsampled).
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    lr_labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    learning_rate: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Pixels per SGD step; 0 means full batch.
    #[arg(long, default_value_t = 4096)]
    batch_pixels: usize,
    #[arg(long, default_value_t = 1e-4)]
    l2_reg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PromptsArgs {
    /// Upsampled feature maps, one per image.
    #[arg(long, required = true)]
    features: Vec<PathBuf>,
    /// Coarse label maps, one per image (probe mode).
    #[arg(long)]
    lr_labels: Vec<PathBuf>,
    /// Trained probe (probe mode).
    #[arg(long)]
    probe: Option<PathBuf>,
    /// Reference label maps, one per image (oracle mode).
    #[arg(long, conflicts_with_all = ["probe", "lr_labels"])]
    truth: Vec<PathBuf>,
    /// Average per-image prompts instead of pooling pixels across images.
    #[arg(long)]
    per_image: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    scores_out: PathBuf,
    #[arg(long)]
    labels_out: PathBuf,
    /// Optional colour-coded PPM of the labels.
    #[arg(long)]
    colormap: Option<PathBuf>,
}

#[derive(Args)]
struct SuperpixelArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8000)]
    n_segments: usize,
    #[arg(long, default_value_t = 10.0)]
    compactness: f64,
    #[arg(long, default_value_t = 10)]
    max_iters: usize,
    #[arg(long)]
    no_connectivity: bool,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Spatial kernel exponent.
    #[arg(long, default_value_t = 2.0)]
    q: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = Solver::FixedPoint)]
    solver: Solver,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    /// Write the affinity graph as `i j weight` lines.
    #[arg(long)]
    graph_dump: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Count classes absent from both maps as IoU 0 instead of skipping them.
    #[arg(long)]
    absent_as_zero: bool,
}

#[derive(Args)]
struct BaselineArgs {
    /// Features at label resolution (upsampled).
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    lr_labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--section.key value` or `--section.key=value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn stage<T>(name: &str, r: landsr_core::Result<T>) -> Result<T> {
    r.with_context(|| format!("stage {name}"))
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SceneSpec {
        height: a.height,
        width: a.width,
        classes: a.classes,
        feature_dim: a.dim,
        patch: a.patch,
        n_regions: a.regions,
        embed_separation: a.separation,
        embed_noise: a.embed_noise,
        image_noise: a.image_noise,
        lr_factor: a.lr_factor,
        label_flip_rate: a.flip_rate,
        seed: a.seed,
    };
    let scene = stage("synth", generate_scene(&spec))?;
    fs::create_dir_all(&a.out)
        .with_context(|| format!("stage synth: creating {}", a.out.display()))?;
    stage("synth", write_image(&scene.image, a.out.join(IMAGE_FILE)))?;
    stage(
        "synth",
        write_feature_map(&scene.patch_features, a.out.join(FEATURES_FILE)),
    )?;
    stage(
        "synth",
        write_feature_map(&scene.dense_features, a.out.join(DENSE_FILE)),
    )?;
    stage(
        "synth",
        write_label_map(&scene.truth, a.out.join(TRUTH_FILE)),
    )?;
    stage(
        "synth",
        write_label_map(&scene.lr_labels, a.out.join(LR_FILE)),
    )?;
    info!("wrote scene to {}", a.out.display());
    Ok(())
}

fn upsample(a: UpsampleArgs) -> Result<()> {
    let feats = stage("upsample", read_feature_map(&a.features))?;
    let image = stage("upsample", read_image(&a.image))?;
    let cfg = UpsampleConfig {
        window_radius: a.radius,
        color_bandwidth: a.tau_c,
        spatial_bandwidth: a.tau_s,
        mode: a.mode,
    };
    let dense = stage("upsample", upsample_features(&feats, &image, &cfg))?;
    stage("upsample", write_feature_map(&dense, &a.out))
}

fn probe(a: ProbeArgs) -> Result<()> {
    let feats = stage("probe", read_feature_map(&a.features))?;
    let lr = stage("probe", read_label_map(&a.lr_labels))?;
    let lr_up = stage(
        "probe",
        upsample_labels_nn(&lr, feats.height(), feats.width()),
    )?;
    let cfg = ProbeTrainConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        batch_pixels: (a.batch_pixels > 0).then_some(a.batch_pixels),
        seed: a.seed,
        l2_reg: a.l2_reg,
    };
    let trained = stage("probe", train_probe(&feats, &lr_up, &cfg))?;
    for (epoch, loss) in trained.loss_history.iter().enumerate() {
        println!("epoch={epoch} loss={loss:.6}");
    }
    println!("parameters={}", trained.probe.parameter_count());
    stage("probe", write_probe(&trained.probe, &a.out))
}

fn prompts(a: PromptsArgs) -> Result<()> {
    let oracle = !a.truth.is_empty();
    let labels = if oracle { &a.truth } else { &a.lr_labels };
    if labels.len() != a.features.len() {
        bail!(
            "stage prompts: {} feature maps but {} label maps",
            a.features.len(),
            labels.len()
        );
    }
    let probe = match (&a.probe, oracle) {
        (Some(p), false) => Some(stage("prompts", read_probe(p))?),
        (None, false) => {
            bail!("stage prompts: probe mode needs --probe (or give --truth for oracle prompts)")
        }
        _ => None,
    };
    let mut pooled: Option<PromptAccumulator> = None;
    let mut sets = Vec::new();
    for (fp, lp) in a.features.iter().zip(labels) {
        let feats = stage("prompts", read_feature_map(fp))?;
        let lab = stage("prompts", read_label_map(lp))?;
        let new_acc = || match oracle {
            true => PromptAccumulator::oracle(lab.classes(), feats.channels()),
            false => PromptAccumulator::probe_agreement(lab.classes(), feats.channels()),
        };
        let mut single = new_acc();
        let acc = if a.per_image {
            &mut single
        } else {
            pooled.get_or_insert_with(new_acc)
        };
        match &probe {
            Some(p) => {
                let lr_up = stage(
                    "prompts",
                    upsample_labels_nn(&lab, feats.height(), feats.width()),
                )?;
                let pred = stage("prompts", probe_predict(p, &feats))?;
                stage("prompts", acc.add_probe_image(&feats, &pred, &lr_up))?;
            }
            None => stage("prompts", acc.add_oracle_image(&feats, &lab))?,
        }
        if a.per_image {
            sets.push(stage("prompts", single.finish())?);
        }
    }
    let set = match pooled {
        Some(acc) => stage("prompts", acc.finish())?,
        None => stage("prompts", average_prompt_sets(&sets))?,
    };
    for c in 0..set.classes() {
        println!(
            "class={c} support={} provenance={}",
            set.support(c),
            set.provenance(c).name()
        );
    }
    stage("prompts", write_prompts(&set, &a.out))
}

fn predict(a: PredictArgs) -> Result<()> {
    let feats = stage("predict", read_feature_map(&a.features))?;
    let set = stage("predict", read_prompts(&a.prompts))?;
    let scores = stage("predict", cosine_scores(&feats, &set))?;
    let labels = argmax_labels(&scores);
    stage("predict", write_score_map(&scores, &a.scores_out))?;
    stage("predict", write_label_map(&labels, &a.labels_out))?;
    if let Some(path) = &a.colormap {
        stage(
            "predict",
            write_colormap(&labels, &default_palette(labels.classes()), path),
        )?;
    }
    Ok(())
}

fn superpixel(a: SuperpixelArgs) -> Result<()> {
    let image = stage("superpixel", read_image(&a.image))?;
    let cfg = SlicConfig {
        n_segments: a.n_segments,
        compactness: a.compactness,
        max_iters: a.max_iters,
        enforce_connectivity: !a.no_connectivity,
    };
    let seg = stage("superpixel", slic_segment(&image, &cfg))?;
    println!("segments={}", seg.count());
    stage("superpixel", write_segmentation(&seg, &a.out))
}

fn refine(a: RefineArgs) -> Result<()> {
    let seg = stage("refine", read_segmentation(&a.segments))?;
    let feats = stage("refine", read_feature_map(&a.features))?;
    let scores = stage("refine", read_score_map(&a.scores))?;
    let cfg = GraphConfig {
        k: a.k,
        gamma: a.gamma,
        sigma: a.sigma,
        spatial_exponent: a.q,
        alpha: a.alpha,
        tol: a.tol,
        max_prop_iters: a.max_iters,
        solver: a.solver,
    };
    let part = stage("refine", summarize_segments(&seg, &feats, &scores))?;
    let graph = stage("refine", build_graph(&part, &cfg))?;
    if let Some(path) = &a.graph_dump {
        let file = File::create(path)
            .with_context(|| format!("stage refine: creating {}", path.display()))?;
        let mut out = BufWriter::new(file);
        graph
            .write_edge_list(&mut out)
            .and_then(|_| out.flush())
            .context("stage refine: writing graph dump")?;
    }
    let refined = stage("refine", refine_labels(&part, &graph, &cfg))?;
    println!(
        "nodes={} edges={} k_clamped={}",
        graph.nodes(),
        graph.edge_count(),
        graph.k_clamped
    );
    stage("refine", write_label_map(&refined.labels, &a.out))
}

fn print_metrics(pred: &LabelMap, truth: &LabelMap, absent_as_zero: bool) -> Result<()> {
    let cm = stage(
        "eval",
        accumulate_confusion(pred, truth, ConfusionMatrix::new(truth.classes())),
    )?;
    let report = stage("eval", miou(&cm, absent_as_zero))?;
    print!("{}", report.to_table());
    println!("ignored={}", cm.ignored);
    print!("{}", report.to_key_values());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = stage("eval", read_label_map(&a.pred))?;
    let truth = stage("eval", read_label_map(&a.truth))?;
    print_metrics(&pred, &truth, a.absent_as_zero)
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let feats = stage("baseline-kmeans", read_feature_map(&a.features))?;
    let lr = stage("baseline-kmeans", read_label_map(&a.lr_labels))?;
    let lr_up = stage(
        "baseline-kmeans",
        upsample_labels_nn(&lr, feats.height(), feats.width()),
    )?;
    let cfg = KMeansConfig {
        k: a.k,
        max_iters: a.max_iters,
        seed: a.seed,
        ..Default::default()
    };
    let labels = stage(
        "baseline-kmeans",
        kmeans_voting_baseline(&feats, &lr_up, &cfg),
    )?;
    stage("baseline-kmeans", write_label_map(&labels, &a.out))
}

/// Turns `--a.b v` / `--a.b=v` pairs into `(key, value)`.
fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .with_context(|| format!("stage config: expected `--key`, got {arg:?}"))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let value = it
                    .next()
                    .with_context(|| format!("stage config: missing value for --{key}"))?;
                out.push((key.to_string(), value.clone()));
            }
        }
    }
    Ok(out)
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .with_context(|| format!("stage config: {key} is not set"))
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("stage config: reading {}", path.display()))?;
        stage("config", cfg.apply_text(&text))?;
    }
    for (k, v) in parse_overrides(&a.overrides)? {
        stage("config", cfg.set(&k, &v))?;
    }
    stage("config", cfg.validate())?;

    let paths = cfg.paths.clone();
    let image = stage(
        "upsample",
        read_image(required(&paths.image, "paths.image")?),
    )?;
    let features = stage(
        "upsample",
        read_feature_map(required(&paths.features, "paths.features")?),
    )?;
    let lr = stage(
        "probe",
        read_label_map(required(&paths.lr_labels, "paths.lr_labels")?),
    )?;
    let truth = paths.truth.as_ref().map(read_label_map).transpose();
    let truth = stage("eval", truth)?;
    let oracle = match &paths.oracle_dir {
        Some(dir) => Some((
            stage("prompts", read_image(dir.join(IMAGE_FILE)))?,
            stage("prompts", read_feature_map(dir.join(FEATURES_FILE)))?,
            stage("prompts", read_label_map(dir.join(TRUTH_FILE)))?,
        )),
        None => None,
    };
    let inputs = PipelineInputs {
        image: &image,
        features: &features,
        lr_labels: &lr,
        truth: truth.as_ref(),
        oracle: oracle.as_ref().map(|(image, features, truth)| OracleTile {
            image,
            features,
            truth,
        }),
    };
    let out = run_pipeline(&inputs, &cfg)?;
    info!("processed {} chips", out.chips);
    if let Some(path) = &paths.output {
        stage("mosaic", write_label_map(&out.labels, path))?;
    }
    if let Some(report) = &out.report {
        print!("{}", report.to_table());
        print!("{}", report.to_key_values());
    }
    Ok(())
}

/// Joins the error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Upsample(a) => upsample(a),
        Command::Probe(a) => probe(a),
        Command::Prompts(a) => prompts(a),
        Command::Predict(a) => predict(a),
        Command::Superpixel(a) => superpixel(a),
        Command::Refine(a) => refine(a),
        Command::Eval(a) => eval(a),
        Command::BaselineKmeans(a) => baseline(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
