//! Trains a small scene, then runs one open-vocabulary query per object and
//! writes relevancy heatmaps and masks.
//!
//! `cargo run --release --example query [out_dir]`

use std::path::PathBuf;

use legaussians::formats::{save_heatmap_png, save_mask_png};
use legaussians::pipeline::{object_queries, prepare, query_views};
use legaussians::quantizer::QuantizerConfig;
use legaussians::query::segment;
use legaussians::raster::RasterSettings;
use legaussians::synth::SceneSpec;
use legaussians::trainer::{train, SceneModel, TrainConfig};

fn main() -> legaussians::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("legaussians-query"));
    std::fs::create_dir_all(&out).map_err(|e| legaussians::Error::io(&out, e))?;
    let spec = SceneSpec { image_size: (64, 64), camera_count: 12, gaussians_per_object: 300, ..SceneSpec::default() };
    let prepared = prepare(&spec, &QuantizerConfig { codebook_size: 16, ..QuantizerConfig::default() })?;
    let cfg = TrainConfig { iterations: 300, codebook_size: 16, ..TrainConfig::default() };
    let model = SceneModel::init(prepared.scene.initial_cloud(1200, 0), 16, 0, 0);
    let (model, _) = train(model, &prepared.training_views(), &cfg)?;

    let queries = object_queries(&prepared.scene);
    let view = &prepared.views[..1];
    let maps = query_views(&model, &prepared.fit.codebook, view, &queries, &RasterSettings::with_background(prepared.scene.background))?;
    for (q, m) in queries.iter().zip(&maps) {
        let map = &m[0];
        let mask = segment(map, q.threshold);
        let truth = view[0].labels.labels.iter().filter(|&&l| Some(l) == q.name.strip_prefix("object").and_then(|s| s.parse().ok())).count();
        println!("{}: {} pixels above {:.2} ({} in ground truth)", q.name, mask.count(), q.threshold, truth);
        save_heatmap_png(&out.join(format!("{}_heat.png", q.name)), map)?;
        save_mask_png(&out.join(format!("{}_mask.png", q.name)), &mask)?;
    }
    println!("wrote heatmaps and masks to {}", out.display());
    Ok(())
}
