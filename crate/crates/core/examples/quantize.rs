//! Fits the feature codebook with and without the load-balancing term and
//! compares how evenly the entries are used.
//!
//! `cargo run --release --example quantize`

use legaussians::quantizer::{fit_codebook, utilization_entropy, QuantizerConfig};
use legaussians::synth::{build_views, generate_scene, NoiseConfig, SceneSpec};

fn main() -> legaussians::Result<()> {
    // Per-view jitter and blurred boundaries spread the features out so the
    // codebook has something to balance.
    let noise = NoiseConfig { view_jitter_sigma: 0.3, boundary_blur_px: 3, dino_blur_px: 2, ..NoiseConfig::default() };
    let spec = SceneSpec { image_size: (64, 64), camera_count: 12, noise, ..SceneSpec::default() };
    let views = build_views(&generate_scene(&spec)?)?;
    let maps: Vec<_> = views.into_iter().map(|v| v.features).collect();
    for lambda_lb in [0.0, 0.5] {
        let cfg = QuantizerConfig { codebook_size: 16, lambda_lb, ..QuantizerConfig::default() };
        let fit = fit_codebook(&maps, &cfg)?;
        let last = fit.history.last().expect("at least one epoch");
        let used = last.utilization.iter().filter(|&&c| c > 0).count();
        println!(
            "lambda_lb {lambda_lb:.1}: cosine loss {:.4}, {used}/{} entries used, utilization entropy {:.3} nats (max {:.3})",
            last.cosine_loss.abs(),
            fit.codebook.n(),
            utilization_entropy(&last.utilization),
            (fit.codebook.n() as f64).ln()
        );
    }
    Ok(())
}
