//! Generates the default desk scene and writes one view, its label map and
//! a PCA rendering of its hybrid features.
//!
//! `cargo run --release --example synthetic_scene [out_dir]`

use std::path::PathBuf;

use legaussians::formats::{pca_rgb, save_label_map, save_rgb_png};
use legaussians::synth::{build_views, generate_scene, SceneSpec};

fn main() -> legaussians::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("legaussians-scene"));
    std::fs::create_dir_all(&out).map_err(|e| legaussians::Error::io(&out, e))?;
    let spec = SceneSpec::default();
    let scene = generate_scene(&spec)?;
    let views = build_views(&scene)?;
    println!("{} objects, {} Gaussians, {} views at {}x{}", scene.objects.len(), scene.gaussians.len(), views.len(), spec.image_size.0, spec.image_size.1);
    for (i, o) in scene.objects.iter().enumerate() {
        println!("object {i}: center {:?} semi-axes {:?}", o.center.map(|v| (v * 100.0).round() / 100.0), o.semi_axes.map(|v| (v * 100.0).round() / 100.0));
    }
    let v = &views[0];
    save_rgb_png(&out.join("rgb.png"), &v.rgb)?;
    save_label_map(&out.join("labels.png"), &v.labels)?;
    save_rgb_png(&out.join("features_pca.png"), &pca_rgb(&v.features.image))?;
    println!("wrote view 0 to {}", out.display());
    Ok(())
}
