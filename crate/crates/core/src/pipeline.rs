//! In-memory glue between the stages: synthetic data, quantization,
//! training views, object queries and evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::error::Result;
use crate::eval::{image_report, segmentation_metrics, ImageReport, QueryMaps, SegmentationReport};
use crate::quantizer::{fit_codebook, Codebook, IndexMap, QuantizerConfig, QuantizerFit};
use crate::query::{default_canonicals, relevancy, render_feature_map, selection_probabilities, QuerySpec, RelevancyMap};
use crate::raster::{rasterize, RasterSettings};
use crate::scene::{Camera, GaussianCloud};
use crate::synth::{build_views, generate_scene, SceneSpec, SyntheticScene, View};
use crate::trainer::{SceneModel, TrainingView};

/// A generated scene with its quantized supervision.
pub struct PreparedScene {
    pub scene: SyntheticScene,
    pub views: Vec<View>,
    pub fit: QuantizerFit<f32>,
}

impl PreparedScene {
    pub fn training_views(&self) -> Vec<TrainingView> {
        training_views(&self.views, &self.fit.index_maps)
    }
}

/// Generates `spec`, extracts features and fits the codebook.
pub fn prepare(spec: &SceneSpec, quantizer: &QuantizerConfig) -> Result<PreparedScene> {
    let scene = generate_scene(spec)?;
    let views = build_views(&scene)?;
    let maps: Vec<_> = views.iter().map(|v| v.features.clone()).collect();
    let fit = fit_codebook(&maps, quantizer)?;
    Ok(PreparedScene { scene, views, fit })
}

pub fn training_views(views: &[View], index_maps: &[IndexMap]) -> Vec<TrainingView> {
    views
        .iter()
        .zip(index_maps)
        .map(|(v, m)| TrainingView {
            camera: v.camera.clone(),
            rgb: v.rgb.clone(),
            indices: m.clone(),
        })
        .collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Name of the query for object `label`.
pub fn object_query_name(label: usize) -> String {
    format!("object{label}")
}

/// One query per object using its clean clip embedding and the default negatives.
pub fn object_queries(scene: &SyntheticScene) -> Vec<QuerySpec> {
    let clips: Vec<Vec<f32>> = scene.labels.iter().map(|e| to_f32(&e.clip)).collect();
    let bg = to_f32(&scene.background_embedding.clip);
    (0..clips.len())
        .map(|l| QuerySpec {
            name: object_query_name(l),
            embedding: clips[l].clone(),
            canonicals: default_canonicals(&clips, &bg, l),
            threshold: 0.5,
        })
        .collect()
}

/// Query name to ground-truth label for [`object_queries`].
pub fn object_mapping(scene: &SyntheticScene) -> BTreeMap<String, u16> {
    (0..scene.labels.len()).map(|l| (object_query_name(l), l as u16)).collect()
}

/// Relevancy maps of every query in every view, indexed `[query][view]`.
pub fn query_views(
    model: &SceneModel,
    codebook: &Codebook<f32>,
    views: &[View],
    queries: &[QuerySpec],
    settings: &RasterSettings,
) -> Result<Vec<Vec<RelevancyMap>>> {
    let features = views
        .par_iter()
        .map(|v| render_feature_map(&model.cloud, &model.decoder, codebook, &v.camera, settings))
        .collect::<Result<Vec<_>>>()?;
    queries
        .iter()
        .map(|q| features.iter().map(|f| relevancy(f, q)).collect())
        .collect()
}

/// Image quality on `views` and segmentation quality of the object queries.
pub fn evaluate(
    model: &SceneModel,
    codebook: &Codebook<f32>,
    prepared: &PreparedScene,
    settings: &RasterSettings,
) -> Result<(ImageReport, SegmentationReport)> {
    let views = &prepared.views;
    let pairs = views
        .par_iter()
        .map(|v| Ok((rasterize(&model.cloud, &v.camera, settings)?.color, v.rgb.clone())))
        .collect::<Result<Vec<_>>>()?;
    let image = image_report(&pairs)?;
    let queries = object_queries(&prepared.scene);
    let maps = query_views(model, codebook, views, &queries, settings)?;
    let qm: Vec<QueryMaps<'_>> = queries
        .iter()
        .zip(&maps)
        .map(|(q, m)| QueryMaps { query: &q.name, maps: m })
        .collect();
    let gt: Vec<_> = views.iter().map(|v| v.labels.clone()).collect();
    let seg = segmentation_metrics(&qm, &gt, &object_mapping(&prepared.scene))?;
    Ok((image, seg))
}

/// Mean activated uncertainty of the Gaussians carrying each label in `0..labels`.
pub fn mean_uncertainty_by_label(model: &SceneModel, labels: usize) -> Vec<f64> {
    let cloud = &model.cloud;
    let mut acc = vec![(0.0f64, 0usize); labels];
    for i in 0..cloud.len() {
        if let Some(a) = acc.get_mut(cloud.labels[i] as usize) {
            a.0 += f64::from(cloud.uncertainty(i));
            a.1 += 1;
        }
    }
    acc.into_iter().map(|(s, n)| if n == 0 { 0.0 } else { s / n as f64 }).collect()
}

/// Render timing summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub threads: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// A synthetic cloud of `gaussians` splats with random semantics and
/// `frames` orbiting cameras looking at it.
pub fn bench_scene(gaussians: usize, size: usize, frames: usize, seed: u64) -> Result<(GaussianCloud<f32>, Vec<Camera>)> {
    let objects = 4;
    let spec = SceneSpec {
        object_count: objects,
        gaussians_per_object: gaussians.div_ceil(objects).max(1),
        camera_count: frames.max(1),
        image_size: (size, size),
        seed,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec)?;
    let mut cloud = scene.gaussians;
    let keep: Vec<bool> = (0..cloud.len()).map(|i| i < gaussians).collect();
    cloud.retain_mask(&keep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut cloud.semantics {
        *v = rng.gen_range(-1.0..1.0);
    }
    Ok((cloud, scene.cameras))
}

/// Times one full forward render (all channels) per camera.
pub fn bench_render(cloud: &GaussianCloud<f32>, cameras: &[Camera], settings: &RasterSettings) -> Result<BenchReport> {
    let mut ms = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let t = Instant::now();
        let out = rasterize(cloud, cam, settings)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let mut sorted = ms.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n == 0 {
        0.0
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let (width, height) = cameras.first().map_or((0, 0), |c| (c.width, c.height));
    Ok(BenchReport {
        gaussians: cloud.len(),
        width,
        height,
        frames: n,
        threads: rayon::current_num_threads(),
        median_ms: median,
        mean_ms: if n == 0 { 0.0 } else { ms.iter().sum::<f64>() / n as f64 },
        min_ms: sorted.first().copied().unwrap_or(0.0),
        max_ms: sorted.last().copied().unwrap_or(0.0),
    })
}

/// Mean spread of the decoded codebook distributions inside each object.
///
/// For every view and every object covering at least two pixels, this is
/// the mean squared distance of the per-pixel softmax distributions to their
/// average. Those values are then averaged over all (view, object) pairs.
pub fn intra_object_variance(model: &SceneModel, views: &[View], objects: usize, settings: &RasterSettings) -> Result<f64> {
    let per_view = views
        .par_iter()
        .map(|v| -> Result<Vec<f64>> {
            let r = rasterize(&model.cloud, &v.camera, settings)?;
            let probs = selection_probabilities(&model.decoder.forward(&r.semantic)?);
            let n = probs.channels;
            let mut out = Vec::new();
            for l in 0..objects {
                let px: Vec<usize> = (0..v.labels.labels.len()).filter(|&i| v.labels.labels[i] as usize == l).collect();
                if px.len() < 2 {
                    continue;
                }
                let mean: Vec<f64> = (0..n)
                    .map(|k| px.iter().map(|&i| f64::from(probs.data[i * n + k])).sum::<f64>() / px.len() as f64)
                    .collect();
                let spread = px
                    .iter()
                    .map(|&i| (0..n).map(|k| (f64::from(probs.data[i * n + k]) - mean[k]).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / px.len() as f64;
                out.push(spread);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = per_view.into_iter().flatten().collect();
    Ok(if all.is_empty() { 0.0 } else { all.iter().sum::<f64>() / all.len() as f64 })
}
