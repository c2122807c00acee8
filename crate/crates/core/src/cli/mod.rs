//! The `leg3d` command line: argument parsing, on-disk layout and run manifests.
//!
//! Every command reads its inputs from a working directory (`--dir`) and
//! writes into `--out`, which defaults to the working directory and can be
//! overridden with the `LEG3D_OUT` environment variable.

mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, load_cloud, load_codebook, save_checkpoint, save_cloud, save_codebook, CheckpointMeta, SceneCheckpoint};
use crate::error::{Error, Result};
use crate::eval::{image_report, segmentation_metrics, write_summary_csv, QueryMaps};
use crate::formats::{
    load_features, load_index_map, load_label_map, load_rgb_png, pca_rgb, save_features, save_heatmap_png, save_index_map,
    save_label_map, save_mask_png, save_rgb_png, write_text,
};
use crate::image::{Image, LabelMap};
use crate::pipeline::{bench_render, bench_scene, object_mapping, object_queries, BenchReport};
use crate::quantizer::{fit_codebook, QuantizerConfig};
use crate::query::{features_from_logits, relevancy, segment, QueryFile, QuerySpec};
use crate::raster::{rasterize, RasterSettings};
use crate::scene::Camera;
use crate::synth::{build_views, generate_scene, hemisphere_cameras, scene_sphere, LabelEmbedding, ObjectShape, SceneSpec};
use crate::trainer::{save_loss_csv, SceneModel, TrainConfig, Trainer, TrainingView};

pub use manifest::{sha256_file, FileHash, ManifestBuilder, RunManifest};

pub const SCENE_FILE: &str = "scene.json";
pub const INIT_FILE: &str = "init.gauss";
pub const CODEBOOK_FILE: &str = "codebook.leg3d";
pub const MODEL_FILE: &str = "model.leg3d";
pub const QUERIES_FILE: &str = "queries.toml";

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit status for invalid arguments or configuration.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "leg3d", version, about = "Language-embedded 3D Gaussian splatting")]
struct Cli {
    /// Worker threads; 0 uses every logical core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene with views, features and ground truth.
    Gen(GenArgs),
    /// Fit the feature codebook and write per-view index maps.
    Quantize(QuantizeArgs),
    /// Train Gaussians, decoder and smoothing MLP.
    Train(TrainArgs),
    /// Render colour images and PCA views of the semantic features.
    Render(RenderArgs),
    /// Render relevancy heatmaps and masks for text-free queries.
    Query(QueryArgs),
    /// Compute image and segmentation metrics against ground truth.
    Eval(EvalArgs),
    /// Measure render throughput on a synthetic cloud.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Serialize)]
struct IoArgs {
    /// Working directory holding the inputs.
    #[arg(long, default_value = ".")]
    dir: PathBuf,
    /// Output directory (defaults to the working directory).
    #[arg(long, env = "LEG3D_OUT")]
    out: Option<PathBuf>,
}

impl IoArgs {
    fn out(&self) -> &Path {
        self.out.as_deref().unwrap_or(&self.dir)
    }
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    /// Output directory for the generated scene.
    #[arg(long, env = "LEG3D_OUT", default_value = "scene")]
    out: PathBuf,
    /// Scene specification in TOML; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    /// Square image size in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    gaussians_per_object: Option<usize>,
    /// Comma-separated object ids whose embedding changes between views.
    #[arg(long, value_delimiter = ',')]
    inconsistent: Option<Vec<u32>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of Gaussians in the rough initial cloud used for training.
    #[arg(long, default_value_t = 4000)]
    init_gaussians: usize,
}

#[derive(Args, Debug, Serialize)]
struct QuantizeArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Quantizer configuration in TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Training configuration in TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print a progress line every this many iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug, Serialize)]
struct RenderArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Checkpoint to render (defaults to the trained model in the working directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated training views to render; all when omitted.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
    /// Number of novel orbit views.
    #[arg(long, default_value_t = 4)]
    novel: usize,
}

#[derive(Args, Debug, Serialize)]
struct QueryArgs {
    #[command(flatten)]
    io: IoArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Query file in TOML (defaults to the object queries written by `gen`).
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    io: IoArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long, env = "LEG3D_OUT", default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    gaussians: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Everything `gen` knows about a scene besides the per-view images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub spec: SceneSpec,
    pub cameras: Vec<Camera>,
    pub objects: Vec<ObjectShape>,
    pub labels: Vec<LabelEmbedding>,
    pub background_embedding: LabelEmbedding,
    pub background: [f64; 3],
    /// Ground-truth label of each object query in `queries.toml`.
    pub query_labels: BTreeMap<String, u16>,
}

impl SceneFile {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SCENE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { format: "scene.json", reason: e.to_string() })
    }
}

pub fn rgb_path(dir: &Path, view: usize) -> PathBuf {
    dir.join("views").join(format!("rgb_{view:03}.png"))
}

pub fn labels_path(dir: &Path, view: usize) -> PathBuf {
    dir.join("views").join(format!("labels_{view:03}.png"))
}

pub fn features_path(dir: &Path, view: usize) -> PathBuf {
    dir.join("features").join(format!("view_{view:03}.legfeat"))
}

pub fn index_path(dir: &Path, view: usize) -> PathBuf {
    dir.join("indices").join(format!("index_{view:03}.png"))
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidSpec(_)
        | Error::Config(_)
        | Error::CodebookMismatch { .. }
        | Error::DimensionMismatch { .. }
        | Error::MissingMapping(_)
        | Error::LabelSeparation { .. }
        | Error::CodebookTooLarge { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} worker threads: {e}", cli.threads);
            return EXIT_RUNTIME;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(manifest) => {
            eprintln!("wrote {}", manifest.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<PathBuf> {
    match command {
        Command::Gen(a) => gen(&a),
        Command::Quantize(a) => quantize(&a),
        Command::Train(a) => train(&a),
        Command::Render(a) => render(&a),
        Command::Query(a) => query(&a),
        Command::Eval(a) => eval(&a),
        Command::Bench(a) => bench(&a),
    }
}

fn echo(args: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(args).unwrap_or(serde_json::Value::Null)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn gen(a: &GenArgs) -> Result<PathBuf> {
    let mut spec: SceneSpec = match &a.config {
        Some(p) => read_toml(p)?,
        None => SceneSpec::default(),
    };
    if let Some(v) = a.objects {
        spec.object_count = v;
    }
    if let Some(v) = a.cameras {
        spec.camera_count = v;
    }
    if let Some(v) = a.size {
        spec.image_size = (v, v);
    }
    if let Some(v) = a.gaussians_per_object {
        spec.gaussians_per_object = v;
    }
    if let Some(v) = &a.inconsistent {
        spec.noise.inconsistent_labels = v.clone();
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    let mut m = ManifestBuilder::new("gen", echo(&(a, &spec)));
    m.seed("scene", spec.seed);
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    let scene = generate_scene(&spec)?;
    let views = build_views(&scene)?;
    m.phase("generate");

    let out = &a.out;
    for sub in ["views", "features"] {
        create_dir(&out.join(sub))?;
    }
    for (i, v) in views.iter().enumerate() {
        let paths = [rgb_path(out, i), labels_path(out, i), features_path(out, i)];
        save_rgb_png(&paths[0], &v.rgb)?;
        save_label_map(&paths[1], &v.labels)?;
        save_features(&paths[2], &v.features)?;
        for p in &paths {
            m.output(p)?;
        }
    }
    let init = scene.initial_cloud(a.init_gaussians, spec.seed);
    let init_path = out.join(INIT_FILE);
    save_cloud(&init_path, &init)?;
    m.output(&init_path)?;

    let queries = QueryFile { queries: object_queries(&scene) };
    let q_path = out.join(QUERIES_FILE);
    queries.save(&q_path)?;
    m.output(&q_path)?;

    let file = SceneFile {
        spec: spec.clone(),
        cameras: scene.cameras.clone(),
        objects: scene.objects.clone(),
        labels: scene.labels.clone(),
        background_embedding: scene.background_embedding.clone(),
        background: scene.background,
        query_labels: object_mapping(&scene),
    };
    let scene_path = out.join(SCENE_FILE);
    write_text(&scene_path, &serde_json::to_string_pretty(&file).expect("scene file serializes"))?;
    m.output(&scene_path)?;
    m.phase("write");
    eprintln!("generated {} objects, {} views, {} initial Gaussians", spec.object_count, views.len(), init.len());
    m.write(out)
}

fn quantize(a: &QuantizeArgs) -> Result<PathBuf> {
    let dir = &a.io.dir;
    let scene = SceneFile::load(dir)?;
    let mut cfg: QuantizerConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => QuantizerConfig::default(),
    };
    if let Some(v) = a.codebook_size {
        cfg.codebook_size = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let mut m = ManifestBuilder::new("quantize", echo(&(a, &cfg)));
    m.seed("quantizer", cfg.seed);
    let mut maps = Vec::with_capacity(scene.cameras.len());
    for i in 0..scene.cameras.len() {
        let p = features_path(dir, i);
        maps.push(load_features(&p)?);
        m.input(&p)?;
    }
    m.phase("load");
    let fit = fit_codebook(&maps, &cfg)?;
    m.phase("fit");

    let out = a.io.out();
    create_dir(&out.join("indices"))?;
    let cb_path = out.join(CODEBOOK_FILE);
    save_codebook(&cb_path, &fit.codebook)?;
    m.output(&cb_path)?;
    for (i, map) in fit.index_maps.iter().enumerate() {
        let p = index_path(out, i);
        save_index_map(&p, map)?;
        m.output(&p)?;
    }
    let mut csv = String::from("epoch,total,cosine,load_balance,utilization_entropy\n");
    for e in &fit.history {
        csv += &format!(
            "{},{:.8},{:.8},{:.8},{:.6}\n",
            e.epoch,
            e.total_loss,
            e.cosine_loss,
            e.load_balance_loss,
            crate::quantizer::utilization_entropy(&e.utilization)
        );
    }
    let hist_path = out.join("quantize_history.csv");
    write_text(&hist_path, &csv)?;
    m.output(&hist_path)?;
    m.phase("write");
    eprintln!("codebook N = {}, dim = {}", fit.codebook.n(), fit.codebook.dim());
    m.write(out)
}

fn load_rgb_views(dir: &Path, count: usize, m: &mut ManifestBuilder) -> Result<Vec<Image<f32>>> {
    (0..count)
        .map(|i| {
            let p = rgb_path(dir, i);
            m.input(&p)?;
            load_rgb_png(&p)
        })
        .collect()
}

fn train(a: &TrainArgs) -> Result<PathBuf> {
    let dir = &a.io.dir;
    let scene = SceneFile::load(dir)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.codebook_size {
        cfg.codebook_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let cb_path = dir.join(CODEBOOK_FILE);
    let codebook = load_codebook(&cb_path)?;
    if codebook.n() != cfg.codebook_size {
        return Err(Error::CodebookMismatch {
            context: format!("training configuration vs quantize output {}", cb_path.display()),
            expected: cfg.codebook_size,
            found: codebook.n(),
        });
    }
    let mut m = ManifestBuilder::new("train", echo(&(a, &cfg)));
    m.seed("train", cfg.seed);
    m.input(&cb_path)?;
    let init_path = dir.join(INIT_FILE);
    let cloud = load_cloud(&init_path)?;
    m.input(&init_path)?;
    let rgbs = load_rgb_views(dir, scene.cameras.len(), &mut m)?;
    let mut views = Vec::with_capacity(rgbs.len());
    for (i, (rgb, camera)) in rgbs.into_iter().zip(&scene.cameras).enumerate() {
        let p = index_path(dir, i);
        m.input(&p)?;
        views.push(TrainingView { camera: camera.clone(), rgb, indices: load_index_map(&p)? });
    }
    m.phase("load");

    let model = SceneModel::init(cloud, cfg.codebook_size, cfg.smoothing_frequencies, cfg.seed);
    let mut trainer = Trainer::new(model, &views, cfg.clone())?;
    let log_every = a.log_every;
    trainer.run(|r| {
        if log_every > 0 && (r.iteration + 1) % log_every == 0 {
            eprintln!(
                "iter {:>6}  total {:.5}  rgb {:.5}  ce {:.5}  psnr {:.2}  gaussians {}",
                r.iteration + 1,
                r.total,
                r.rgb,
                r.ce,
                r.psnr,
                r.gaussians
            );
        }
    })?;
    let (model, history) = trainer.finish();
    m.phase("train");

    let out = a.io.out();
    create_dir(out)?;
    let ck = SceneCheckpoint {
        model,
        codebook,
        meta: CheckpointMeta { step: cfg.iterations as u64, config: serde_json::to_value(&cfg).expect("config serializes") },
    };
    let model_path = out.join(MODEL_FILE);
    save_checkpoint(&model_path, &ck)?;
    m.output(&model_path)?;
    let loss_path = out.join("loss.csv");
    save_loss_csv(&history, &loss_path)?;
    m.output(&loss_path)?;
    m.phase("write");
    m.write(out)
}

fn load_model(dir: &Path, checkpoint: &Option<PathBuf>, m: &mut ManifestBuilder) -> Result<SceneCheckpoint> {
    let path = checkpoint.clone().unwrap_or_else(|| dir.join(MODEL_FILE));
    m.input(&path)?;
    let ck = load_checkpoint(&path)?;
    m.seed("train", ck.meta.config.get("seed").and_then(|s| s.as_u64()).unwrap_or(0));
    Ok(ck)
}

fn pick_views(selection: &Option<Vec<usize>>, count: usize) -> Result<Vec<usize>> {
    match selection {
        None => Ok((0..count).collect()),
        Some(v) => {
            if let Some(&bad) = v.iter().find(|&&i| i >= count) {
                return Err(Error::Config(format!("view {bad} does not exist; the scene has {count} views")));
            }
            Ok(v.clone())
        }
    }
}

fn render(a: &RenderArgs) -> Result<PathBuf> {
    let dir = &a.io.dir;
    let scene = SceneFile::load(dir)?;
    let mut m = ManifestBuilder::new("render", echo(a));
    let ck = load_model(dir, &a.checkpoint, &mut m)?;
    let settings = RasterSettings::with_background(scene.background);
    let mut cameras: Vec<(String, Camera)> = pick_views(&a.views, scene.cameras.len())?
        .into_iter()
        .map(|i| (format!("view_{i:03}"), scene.cameras[i].clone()))
        .collect();
    if a.novel > 0 {
        let (center, radius) = scene_sphere(&scene.spec, &scene.objects);
        let size = scene.spec.image_size;
        // Offset the orbit so novel cameras do not coincide with training ones.
        let orbit = hemisphere_cameras(center, radius * 1.1, a.novel, size)?;
        cameras.extend(orbit.into_iter().enumerate().map(|(i, c)| (format!("novel_{i:03}"), c)));
    }
    m.phase("load");
    let out = a.io.out().join("render");
    create_dir(&out)?;
    let frames = cameras
        .par_iter()
        .map(|(_, cam)| -> Result<(Image<f32>, Image<f32>)> {
            let r = rasterize(&ck.model.cloud, cam, &settings)?;
            let logits = ck.model.decoder.forward(&r.semantic)?;
            let features = features_from_logits(&logits, &ck.codebook)?;
            Ok((r.color, pca_rgb(&features.image)))
        })
        .collect::<Result<Vec<_>>>()?;
    m.phase("render");
    for ((name, _), (rgb, pca)) in cameras.iter().zip(&frames) {
        let p_rgb = out.join(format!("rgb_{name}.png"));
        let p_pca = out.join(format!("pca_{name}.png"));
        save_rgb_png(&p_rgb, rgb)?;
        save_rgb_png(&p_pca, pca)?;
        m.output(&p_rgb)?;
        m.output(&p_pca)?;
    }
    m.phase("write");
    m.write(a.io.out())
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn load_queries(dir: &Path, path: &Option<PathBuf>, m: &mut ManifestBuilder) -> Result<Vec<QuerySpec>> {
    let path = path.clone().unwrap_or_else(|| dir.join(QUERIES_FILE));
    m.input(&path)?;
    Ok(QueryFile::load(&path)?.queries)
}

/// Relevancy maps indexed `[query][view]` for the chosen views.
fn relevancy_maps(
    ck: &SceneCheckpoint,
    cameras: &[Camera],
    queries: &[QuerySpec],
    settings: &RasterSettings,
) -> Result<Vec<Vec<crate::query::RelevancyMap>>> {
    let features = cameras
        .par_iter()
        .map(|cam| crate::query::render_feature_map(&ck.model.cloud, &ck.model.decoder, &ck.codebook, cam, settings))
        .collect::<Result<Vec<_>>>()?;
    queries.iter().map(|q| features.iter().map(|f| relevancy(f, q)).collect()).collect()
}

fn query(a: &QueryArgs) -> Result<PathBuf> {
    let dir = &a.io.dir;
    let scene = SceneFile::load(dir)?;
    let mut m = ManifestBuilder::new("query", echo(a));
    let ck = load_model(dir, &a.checkpoint, &mut m)?;
    let queries = load_queries(dir, &a.queries, &mut m)?;
    let views = pick_views(&a.views, scene.cameras.len())?;
    let cameras: Vec<Camera> = views.iter().map(|&i| scene.cameras[i].clone()).collect();
    m.phase("load");
    let maps = relevancy_maps(&ck, &cameras, &queries, &RasterSettings::with_background(scene.background))?;
    m.phase("query");
    for (q, per_view) in queries.iter().zip(&maps) {
        let qdir = a.io.out().join("query").join(file_safe(&q.name));
        create_dir(&qdir)?;
        for (&v, map) in views.iter().zip(per_view) {
            let heat = qdir.join(format!("heat_{v:03}.png"));
            let mask = qdir.join(format!("mask_{v:03}.png"));
            save_heatmap_png(&heat, map)?;
            save_mask_png(&mask, &segment(map, q.threshold))?;
            m.output(&heat)?;
            m.output(&mask)?;
        }
    }
    m.phase("write");
    m.write(a.io.out())
}

fn eval(a: &EvalArgs) -> Result<PathBuf> {
    let dir = &a.io.dir;
    let scene = SceneFile::load(dir)?;
    let mut m = ManifestBuilder::new("eval", echo(a));
    let ck = load_model(dir, &a.checkpoint, &mut m)?;
    let queries = load_queries(dir, &a.queries, &mut m)?;
    let rgbs = load_rgb_views(dir, scene.cameras.len(), &mut m)?;
    let gt: Vec<LabelMap> = (0..scene.cameras.len())
        .map(|i| {
            let p = labels_path(dir, i);
            m.input(&p)?;
            load_label_map(&p)
        })
        .collect::<Result<_>>()?;
    m.phase("load");
    let settings = RasterSettings::with_background(scene.background);
    let pairs = scene
        .cameras
        .par_iter()
        .zip(rgbs)
        .map(|(cam, rgb)| Ok((rasterize(&ck.model.cloud, cam, &settings)?.color, rgb)))
        .collect::<Result<Vec<_>>>()?;
    let image = image_report(&pairs)?;
    let maps = relevancy_maps(&ck, &scene.cameras, &queries, &settings)?;
    let qm: Vec<QueryMaps<'_>> = queries.iter().zip(&maps).map(|(q, v)| QueryMaps { query: &q.name, maps: v }).collect();
    let seg = segmentation_metrics(&qm, &gt, &scene.query_labels)?;
    m.phase("eval");

    let out = a.io.out().join("eval");
    create_dir(&out)?;
    let seg_path = out.join("segmentation.csv");
    let mut buf = Vec::new();
    seg.write_csv(&mut buf)?;
    std::fs::write(&seg_path, &buf).map_err(|e| Error::io(&seg_path, e))?;
    m.output(&seg_path)?;
    let sum_path = out.join("summary.csv");
    let mut buf = Vec::new();
    write_summary_csv(&image, &seg, &mut buf)?;
    std::fs::write(&sum_path, &buf).map_err(|e| Error::io(&sum_path, e))?;
    m.output(&sum_path)?;
    m.phase("write");
    println!("{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "PSNR", "SSIM", "mPA", "mP", "mIoU", "mAP");
    println!(
        "{:>8.3} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
        image.psnr, image.ssim, seg.mpa, seg.mp, seg.miou, seg.map
    );
    m.write(a.io.out())
}

fn bench(a: &BenchArgs) -> Result<PathBuf> {
    if a.frames == 0 || a.size == 0 {
        return Err(Error::Config("bench needs at least one frame of nonzero size".into()));
    }
    let mut m = ManifestBuilder::new("bench", echo(a));
    m.seed("scene", a.seed);
    let (cloud, cameras) = bench_scene(a.gaussians, a.size, a.frames, a.seed)?;
    m.phase("setup");
    let report: BenchReport = bench_render(&cloud, &cameras, &RasterSettings::default())?;
    m.phase("render");
    create_dir(&a.out)?;
    let path = a.out.join("bench.json");
    write_text(&path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    m.output(&path)?;
    println!(
        "{} Gaussians at {}x{} on {} threads: median {:.1} ms/frame ({:.1} fps) over {} frames",
        report.gaussians,
        report.width,
        report.height,
        report.threads,
        report.median_ms,
        1e3 / report.median_ms.max(1e-9),
        report.frames
    );
    m.write(&a.out)
}
