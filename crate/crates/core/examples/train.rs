//! Trains appearance and language features on a small desk scene and
//! reports image and segmentation quality.
//!
//! `cargo run --release --example train [iterations]`

use legaussians::pipeline::{evaluate, prepare};
use legaussians::quantizer::QuantizerConfig;
use legaussians::raster::RasterSettings;
use legaussians::synth::SceneSpec;
use legaussians::trainer::{SceneModel, TrainConfig, Trainer};

fn main() -> legaussians::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let spec = SceneSpec { image_size: (64, 64), camera_count: 16, gaussians_per_object: 400, ..SceneSpec::default() };
    let qcfg = QuantizerConfig { codebook_size: 16, ..QuantizerConfig::default() };
    let prepared = prepare(&spec, &qcfg)?;
    let views = prepared.training_views();
    let cfg = TrainConfig { iterations, codebook_size: 16, ..TrainConfig::default() };
    let model = SceneModel::init(prepared.scene.initial_cloud(1500, 0), 16, cfg.smoothing_frequencies, 0);
    let mut trainer = Trainer::new(model, &views, cfg)?;
    trainer.run(|r| {
        if (r.iteration + 1) % 50 == 0 {
            println!("iter {:>4}: psnr {:.2} dB, ce {:.3}, {} Gaussians", r.iteration + 1, r.psnr, r.ce, r.gaussians);
        }
    })?;
    let (model, _) = trainer.finish();
    let (image, seg) = evaluate(&model, &prepared.fit.codebook, &prepared, &RasterSettings::with_background(prepared.scene.background))?;
    println!("train-view PSNR {:.2} dB, SSIM {:.3}", image.psnr, image.ssim);
    println!("mIoU {:.3}, mPA {:.3}, mP {:.3}, mAP {:.3}", seg.miou, seg.mpa, seg.mp, seg.map);
    Ok(())
}
