mod common;

use common::*;
use legaussians::image::LabelMap;
use legaussians::real::dot;
use legaussians::scene::{Camera, Gaussian, GaussianCloud, SEMANTIC_DIM};
use legaussians::synth::{
    extract_features, generate_scene, render_ground_truth, NoiseConfig, SceneSpec, SyntheticScene,
};

fn small_spec(objects: usize, seed: u64) -> SceneSpec {
    SceneSpec {
        object_count: objects,
        gaussians_per_object: 150,
        camera_count: 4,
        image_size: (40, 32),
        seed,
        ..SceneSpec::default()
    }
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (dot(a, a) * dot(b, b)).sqrt()).clamp(-1.0, 1.0).acos()
}

#[test]
fn empty_scene_still_has_cameras_and_background_labels() {
    let scene = generate_scene(&small_spec(0, 1)).unwrap();
    assert!(scene.gaussians.is_empty());
    assert!(scene.labels.is_empty());
    assert_eq!(scene.cameras.len(), 4);
    let (rgb, labels) = render_ground_truth(&scene, &scene.cameras[0]).unwrap();
    assert!(labels.labels.iter().all(|&l| l == LabelMap::BACKGROUND));
    assert!(rgb.data.iter().all(|&v| v == 0.0));
}

#[test]
fn generation_is_deterministic() {
    let spec = small_spec(4, 42);
    let a = generate_scene(&spec).unwrap();
    let b = generate_scene(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.labels.len(), 4);
    assert_eq!(a.gaussians.len(), 4 * spec.gaussians_per_object);
    assert!(a.gaussians.labels.iter().all(|&l| (l as usize) < a.labels.len()));
    let (_, la) = render_ground_truth(&a, &a.cameras[1]).unwrap();
    let (_, lb) = render_ground_truth(&b, &b.cameras[1]).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn label_embeddings_are_separated_and_unit() {
    for seed in 0..5 {
        let scene = generate_scene(&small_spec(4, seed)).unwrap();
        let mut all: Vec<&[f64]> = scene.labels.iter().map(|e| e.clip.as_slice()).collect();
        all.push(&scene.background_embedding.clip);
        for (i, a) in all.iter().enumerate() {
            assert!((dot(a, a) - 1.0).abs() < 1e-12);
            for b in &all[..i] {
                assert!(angle(a, b).to_degrees() >= 30.0);
            }
        }
        for e in &scene.labels {
            assert!((dot(&e.dino, &e.dino) - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn too_many_planar_labels_is_an_error_naming_the_bound() {
    let spec = SceneSpec {
        d_clip: 2,
        ..small_spec(12, 0)
    };
    let err = generate_scene(&spec).unwrap_err().to_string();
    assert!(err.contains("30 degrees") && err.contains("2 dimensions"), "{err}");
}

#[test]
fn objects_lie_inside_bounds_and_cameras_face_centroid() {
    let scene = generate_scene(&small_spec(4, 9)).unwrap();
    let [lo, hi] = scene.spec.bounds;
    for p in &scene.gaussians.positions {
        for k in 0..3 {
            assert!(p[k] as f64 >= lo[k] - 1e-6 && p[k] as f64 <= hi[k] + 1e-6);
        }
    }
    let n = scene.objects.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|k| scene.objects.iter().map(|o| o.center[k]).sum::<f64>() / n);
    for cam in &scene.cameras {
        let pc = cam.world_to_camera(c);
        assert!(pc[0].abs() < 1e-9 && pc[1].abs() < 1e-9 && pc[2] > 0.0);
    }
}

/// A lone Gaussian big and opaque enough to cover the whole frame.
fn wall_scene(label_count: usize, gaussians: Vec<(Gaussian<f32>, u32)>, cam: &Camera) -> SyntheticScene {
    let mut base = generate_scene(&small_spec(label_count, 3)).unwrap();
    let mut cloud = GaussianCloud::new(SEMANTIC_DIM);
    for (g, l) in gaussians {
        cloud.push(g, l);
    }
    base.gaussians = cloud;
    base.cameras = vec![cam.clone()];
    base
}

fn blob(pos: [f32; 3], log_scale: f32, opacity_raw: f32) -> Gaussian<f32> {
    Gaussian {
        position: pos,
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale: [log_scale; 3],
        opacity_raw,
        color: [0.5; 3],
        semantic: vec![0.0; SEMANTIC_DIM],
        uncertainty_raw: 0.0,
    }
}

#[test]
fn frame_filling_cluster_labels_every_pixel() {
    let cam = Camera::look_at([0.0, -4.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 16, 12, 0.6).unwrap();
    let scene = wall_scene(1, vec![(blob([0.0; 3], 1.5, 6.0), 0)], &cam);
    let (_, labels) = render_ground_truth(&scene, &cam).unwrap();
    assert!(labels.labels.iter().all(|&l| l == 0));
}

#[test]
fn overlapping_clusters_match_depth_ordered_oracle() {
    let mut r = rng(12);
    use rand::Rng;
    for trial in 0..5 {
        let cam = Camera::look_at([0.0, -5.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 20, 16, 0.8).unwrap();
        let mut gs = Vec::new();
        for label in 0..2u32 {
            let y = if label == 0 { -0.6 } else { 0.6 };
            let x0: f32 = r.gen_range(-0.4..0.4);
            for _ in 0..6 {
                let p = [x0 + r.gen_range(-0.4..0.4), y + r.gen_range(-0.2..0.2), r.gen_range(-0.4..0.4)];
                gs.push((blob(p, r.gen_range(-1.6..-0.9), r.gen_range(0.0..3.0)), label));
            }
        }
        let scene = wall_scene(2, gs, &cam);
        let (_, labels) = render_ground_truth(&scene, &cam).unwrap();
        let per_label: Vec<_> = (0..2)
            .map(|l| brute_force_render(&scene.object_cloud(l).cast::<f64>(), &cam, [0.0; 3]))
            .collect();
        let mut contested = 0;
        for i in 0..cam.pixel_count() {
            let mut want = LabelMap::BACKGROUND;
            let mut best = f64::INFINITY;
            for (l, out) in per_label.iter().enumerate() {
                let a = out.alpha.data[i];
                if a > 0.5 {
                    let depth = out.depth.data[i] / a;
                    if depth < best {
                        best = depth;
                        want = l as u16;
                    }
                }
            }
            if per_label.iter().all(|o| o.alpha.data[i] > 0.5) {
                contested += 1;
            }
            assert_eq!(labels.labels[i], want, "trial {trial}, pixel {i}");
        }
        if trial == 0 {
            assert!(contested > 0, "fixture should contain overlapping pixels");
        }
    }
}

fn features_at(scene: &SyntheticScene, view: usize, noise: &NoiseConfig) -> (LabelMap, legaussians::image::HybridFeatureMap) {
    let (_, labels) = render_ground_truth(scene, &scene.cameras[view]).unwrap();
    let f = extract_features(scene, view, &labels, noise).unwrap();
    (labels, f)
}

#[test]
fn zero_noise_features_are_exact_label_embeddings() {
    let scene = generate_scene(&small_spec(3, 5)).unwrap();
    let (labels, f) = features_at(&scene, 0, &NoiseConfig::default());
    let mut seen = 0;
    for (i, &l) in labels.labels.iter().enumerate() {
        let want = if l == LabelMap::BACKGROUND {
            scene.background_embedding.concat()
        } else {
            seen += 1;
            scene.labels[l as usize].concat()
        };
        let got: Vec<f64> = f.feature(i).iter().map(|&v| v as f64).collect();
        assert!(max_abs_diff(&got, &want) < 1e-7);
    }
    assert!(seen > 0);
}

#[test]
fn boundary_blur_matches_direct_convolution() {
    let scene = generate_scene(&small_spec(3, 6)).unwrap();
    let noise = NoiseConfig {
        boundary_blur_px: 4,
        dino_blur_px: 2,
        ..NoiseConfig::default()
    };
    let (labels, f) = features_at(&scene, 1, &noise);
    let (_, exact) = features_at(&scene, 1, &NoiseConfig::default());
    let (w, h) = (labels.width, labels.height);
    let emb = |l: u16| {
        if l == LabelMap::BACKGROUND {
            scene.background_embedding.clone()
        } else {
            scene.labels[l as usize].clone()
        }
    };
    let interior = labels.interior_mask(4);
    let mut boundary = 0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if interior[i] {
                assert_eq!(f.feature(i), exact.feature(i));
                continue;
            }
            boundary += 1;
            let mut want = Vec::new();
            for (radius, part) in [(4usize, 0), (2, 1)] {
                let mut acc = vec![0.0; if part == 0 { 32 } else { 16 }];
                for yy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                    for xx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                        let e = emb(labels.get(xx, yy));
                        let v = if part == 0 { e.clip } else { e.dino };
                        for (a, b) in acc.iter_mut().zip(v) {
                            *a += b;
                        }
                    }
                }
                let n = dot(&acc, &acc).sqrt();
                want.extend(acc.iter().map(|a| a / n));
            }
            let got: Vec<f64> = f.feature(i).iter().map(|&v| v as f64).collect();
            assert!(max_abs_diff(&got, &want) < 1e-6, "pixel ({x}, {y})");
        }
    }
    assert!(boundary > 0);
}

#[test]
fn features_are_unit_per_slice() {
    let spec = SceneSpec {
        noise: NoiseConfig {
            view_jitter_sigma: 0.2,
            boundary_blur_px: 3,
            dino_blur_px: 1,
            inconsistent_labels: vec![1],
        },
        ..small_spec(3, 8)
    };
    let scene = generate_scene(&spec).unwrap();
    let (_, f) = features_at(&scene, 2, &spec.noise);
    for i in 0..f.pixel_count() {
        let v: Vec<f64> = f.feature(i).iter().map(|&v| v as f64).collect();
        assert!((dot(&v[..32], &v[..32]).sqrt() - 1.0).abs() < 1e-6);
        assert!((dot(&v[32..], &v[32..]).sqrt() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn inconsistent_object_drifts_more_than_jitter() {
    let noise = NoiseConfig {
        view_jitter_sigma: 0.05,
        inconsistent_labels: vec![0],
        ..NoiseConfig::default()
    };
    let spec = SceneSpec {
        noise: noise.clone(),
        ..small_spec(2, 10)
    };
    let scene = generate_scene(&spec).unwrap();
    let mean_of = |view: usize, label: u16| -> Vec<f64> {
        let (labels, f) = features_at(&scene, view, &noise);
        let mut acc = vec![0.0; 32];
        for (i, &l) in labels.labels.iter().enumerate() {
            if l == label {
                for (a, &v) in acc.iter_mut().zip(&f.feature(i)[..32]) {
                    *a += v as f64;
                }
            }
        }
        acc
    };
    let inconsistent = angle(&mean_of(0, 0), &mean_of(3, 0));
    let consistent = angle(&mean_of(0, 1), &mean_of(3, 1));
    assert!(inconsistent > 4.0 * consistent, "{inconsistent} vs {consistent}");
    assert!(inconsistent > 0.5);
}

#[test]
fn extraction_is_thread_count_invariant() {
    let spec = SceneSpec {
        noise: NoiseConfig {
            view_jitter_sigma: 0.1,
            boundary_blur_px: 2,
            dino_blur_px: 1,
            inconsistent_labels: vec![],
        },
        ..small_spec(3, 11)
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let scene = generate_scene(&spec).unwrap();
                features_at(&scene, 1, &spec.noise)
            })
    };
    let (la, fa) = run(1);
    let (lb, fb) = run(3);
    assert_eq!(la, lb);
    assert_eq!(fa, fb);
}

#[test]
fn invalid_noise_is_rejected() {
    let spec = SceneSpec {
        noise: NoiseConfig {
            boundary_blur_px: 1,
            dino_blur_px: 2,
            ..NoiseConfig::default()
        },
        ..small_spec(2, 0)
    };
    assert!(generate_scene(&spec).unwrap_err().to_string().contains("dino_blur_px"));
}
