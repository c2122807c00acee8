//! Renders the ground-truth cloud of the desk scene and times the forward pass.
//!
//! `cargo run --release --example rasterize`

use std::time::Instant;

use legaussians::raster::{rasterize, RasterSettings};
use legaussians::synth::{generate_scene, SceneSpec};

fn main() -> legaussians::Result<()> {
    let scene = generate_scene(&SceneSpec::default())?;
    let settings = RasterSettings::with_background(scene.background);
    for cam in scene.cameras.iter().take(3) {
        let t = Instant::now();
        let out = rasterize(&scene.gaussians, cam, &settings)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        let covered = out.alpha.data.iter().filter(|&&a| a > 0.5).count();
        let mean_depth = out.depth.data.iter().zip(&out.alpha.data).map(|(d, a)| d * a).sum::<f32>() / out.alpha.data.iter().sum::<f32>().max(1e-6);
        println!(
            "{}x{}: {:.1} ms, {:.1}% of pixels covered, mean depth {:.2}",
            cam.width,
            cam.height,
            ms,
            100.0 * covered as f64 / out.alpha.data.len() as f64,
            mean_depth
        );
    }
    Ok(())
}
