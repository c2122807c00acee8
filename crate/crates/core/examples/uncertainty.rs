//! Makes one object's language features disagree between views and shows
//! that its Gaussians learn a higher uncertainty than the others.
//!
//! `cargo run --release --example uncertainty [iterations]`

use legaussians::pipeline::{mean_uncertainty_by_label, prepare};
use legaussians::quantizer::QuantizerConfig;
use legaussians::synth::{NoiseConfig, SceneSpec};
use legaussians::trainer::{train, SceneModel, TrainConfig};

fn main() -> legaussians::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let spec = SceneSpec {
        image_size: (48, 48),
        camera_count: 16,
        gaussians_per_object: 300,
        noise: NoiseConfig { inconsistent_labels: vec![0], ..NoiseConfig::default() },
        ..SceneSpec::default()
    };
    let prepared = prepare(&spec, &QuantizerConfig::default())?;
    let mut cfg = TrainConfig { iterations, ..TrainConfig::default() };
    cfg.density.enabled = false;
    let model = SceneModel::init(prepared.scene.initial_cloud(1200, 0), cfg.codebook_size, 0, 0);
    let (model, _) = train(model, &prepared.training_views(), &cfg)?;
    let u = mean_uncertainty_by_label(&model, spec.object_count);
    for (l, v) in u.iter().enumerate() {
        println!("object {l}{}: mean u = {v:.3e}", if l == 0 { " (inconsistent)" } else { "" });
    }
    let others = u[1..].iter().sum::<f64>() / (u.len() - 1) as f64;
    println!("ratio {:.2}", u[0] / others);
    Ok(())
}
