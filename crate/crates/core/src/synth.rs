//! Synthetic scenes with known labels, standing in for real CLIP/DINO
//! feature extraction.
//!
//! A scene is a set of disjoint ellipsoidal Gaussian clusters, one per
//! object. Each object owns a unit label embedding (clip and dino parts) and
//! every camera sees a lightly perturbed copy of it; objects listed as
//! inconsistent get an unrelated embedding per camera instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{HybridFeatureMap, Image, LabelMap};
use crate::raster::{rasterize, RasterSettings};
use crate::real::{dot, normalize_in_place};
use crate::scene::{Camera, Gaussian, GaussianCloud, SEMANTIC_DIM, UNCERTAINTY_RAW_INIT};

/// Minimum angle between any two clip-part label embeddings, background included.
pub const MIN_LABEL_ANGLE_DEG: f64 = 30.0;

const EMBEDDING_ATTEMPTS: usize = 20_000;
const PLACEMENT_ATTEMPTS: usize = 2_000;
const CAMERA_DISTANCE_FACTOR: f64 = 1.5;
/// Standard deviation of the semantic features of a fresh training cloud.
const SEMANTIC_INIT_SIGMA: f64 = 0.1;
/// Alpha a single cluster must exceed to claim a pixel in the label map.
pub const LABEL_ALPHA_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation (radians) of the per-view rotation of each label embedding.
    pub view_jitter_sigma: f64,
    /// Box-blur radius in pixels applied to the clip slice.
    pub boundary_blur_px: usize,
    /// Box-blur radius in pixels applied to the dino slice.
    pub dino_blur_px: usize,
    /// Object ids whose embedding is redrawn independently for every camera.
    pub inconsistent_labels: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub object_count: usize,
    pub gaussians_per_object: usize,
    pub d_clip: usize,
    pub d_dino: usize,
    /// Axis-aligned `[min, max]` corners in world units.
    pub bounds: [[f64; 3]; 2],
    pub camera_count: usize,
    pub image_size: (usize, usize),
    pub seed: u64,
    pub noise: NoiseConfig,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            object_count: 4,
            gaussians_per_object: 800,
            d_clip: 32,
            d_dino: 16,
            bounds: [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
            camera_count: 30,
            image_size: (128, 128),
            seed: 0,
            noise: NoiseConfig::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.d_clip < 2 {
            return bad(format!("d_clip must be at least 2, got {}", self.d_clip));
        }
        if self.d_dino < 1 {
            return bad(format!("d_dino must be at least 1, got {}", self.d_dino));
        }
        if self.object_count > 0 && self.gaussians_per_object == 0 {
            return bad("gaussians_per_object must be positive".into());
        }
        if self.camera_count == 0 {
            return bad("camera_count must be positive".into());
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return bad("image_size must be nonzero".into());
        }
        if self.object_count >= LabelMap::BACKGROUND as usize {
            return bad(format!("object_count must be below {}", LabelMap::BACKGROUND));
        }
        for k in 0..3 {
            let (lo, hi) = (self.bounds[0][k], self.bounds[1][k]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("bounds axis {k} must satisfy min < max"));
            }
        }
        let n = &self.noise;
        if !(n.view_jitter_sigma >= 0.0 && n.view_jitter_sigma.is_finite()) {
            return bad("view_jitter_sigma must be a finite value >= 0".into());
        }
        if n.dino_blur_px > n.boundary_blur_px {
            return bad(format!(
                "dino_blur_px ({}) must not exceed boundary_blur_px ({})",
                n.dino_blur_px, n.boundary_blur_px
            ));
        }
        if let Some(&l) = n.inconsistent_labels.iter().find(|&&l| l as usize >= self.object_count) {
            return bad(format!("inconsistent label {l} is not an object id"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.d_clip + self.d_dino
    }
}

/// A unit clip part paired with a unit dino part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbedding {
    pub clip: Vec<f64>,
    pub dino: Vec<f64>,
}

impl LabelEmbedding {
    /// Concatenated `[clip, dino]` vector.
    pub fn concat(&self) -> Vec<f64> {
        self.clip.iter().chain(&self.dino).copied().collect()
    }
}

/// One ellipsoidal object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectShape {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    /// Ground-truth cloud; `labels[i]` is the object id of Gaussian `i`.
    pub gaussians: GaussianCloud<f32>,
    pub objects: Vec<ObjectShape>,
    pub labels: Vec<LabelEmbedding>,
    pub background_embedding: LabelEmbedding,
    pub cameras: Vec<Camera>,
    pub background: [f64; 3],
}

/// Ground truth seen from one camera.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub rgb: Image<f32>,
    pub labels: LabelMap,
    pub features: HybridFeatureMap<f32>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize_in_place(&mut v) > 1e-6 {
            return v;
        }
    }
}

/// Rotates unit `e` by an angle drawn from `|N(0, sigma)|` toward a random orthogonal direction.
fn jitter(e: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return e.to_vec();
    }
    let theta = sigma * f64::abs(StandardNormal.sample(rng));
    loop {
        let mut v = random_unit(rng, e.len());
        let d = dot(&v, e);
        for (vi, &ei) in v.iter_mut().zip(e) {
            *vi -= d * ei;
        }
        if normalize_in_place(&mut v) > 1e-6 {
            return e.iter().zip(&v).map(|(&a, &b)| theta.cos() * a + theta.sin() * b).collect();
        }
    }
}

/// Draws `count` unit vectors whose pairwise angles are all at least `MIN_LABEL_ANGLE_DEG`.
pub fn separated_embeddings(count: usize, dim: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let err = || Error::LabelSeparation {
        labels: count,
        dim,
        min_angle_deg: MIN_LABEL_ANGLE_DEG,
        attempts: EMBEDDING_ATTEMPTS,
    };
    // In the plane at most 360/30 directions fit; fail before sampling.
    if dim == 2 && count > (360.0 / MIN_LABEL_ANGLE_DEG) as usize {
        return Err(err());
    }
    let max_cos = MIN_LABEL_ANGLE_DEG.to_radians().cos();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let found = (0..EMBEDDING_ATTEMPTS)
            .map(|_| random_unit(rng, dim))
            .find(|v| out.iter().all(|u| dot(u, v) <= max_cos));
        out.push(found.ok_or_else(err)?);
    }
    Ok(out)
}

fn hsv_color(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn random_rotation(rng: &mut impl Rng) -> [f64; 4] {
    let v = random_unit(rng, 4);
    [v[0], v[1], v[2], v[3]]
}

fn place_objects(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Vec<ObjectShape>> {
    let [lo, hi] = spec.bounds;
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(f64::INFINITY, f64::min);
    let n = spec.object_count.max(1) as f64;
    let base = 0.3 * extent / n.cbrt();
    let mut objects: Vec<ObjectShape> = Vec::new();
    let hue0: f64 = rng.gen();
    for i in 0..spec.object_count {
        let semi_axes = [0; 3].map(|_| base * rng.gen_range(0.6..1.0));
        let r = semi_axes.iter().copied().fold(0.0, f64::max);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c: [f64; 3] = std::array::from_fn(|k| {
                let (a, b) = (lo[k] + r, hi[k] - r);
                if a < b {
                    rng.gen_range(a..b)
                } else {
                    0.5 * (lo[k] + hi[k])
                }
            });
            let clear = objects.iter().all(|o| {
                let ro = o.semi_axes.iter().copied().fold(0.0, f64::max);
                let d2: f64 = (0..3).map(|k| (c[k] - o.center[k]).powi(2)).sum();
                d2.sqrt() > 1.1 * (r + ro)
            });
            if clear {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::InvalidSpec(format!(
                "could not fit {} disjoint objects inside the bounds",
                spec.object_count
            ))
        })?;
        let hue = hue0 + i as f64 / n;
        let color = hsv_color(hue, rng.gen_range(0.55..0.85), rng.gen_range(0.7..0.95));
        objects.push(ObjectShape {
            center,
            semi_axes,
            color,
        });
    }
    Ok(objects)
}

fn object_gaussians(
    spec: &SceneSpec,
    objects: &[ObjectShape],
    rng: &mut impl Rng,
) -> GaussianCloud<f32> {
    let mut cloud = GaussianCloud::new(SEMANTIC_DIM);
    let per = spec.gaussians_per_object;
    for (id, obj) in objects.iter().enumerate() {
        let q = random_rotation(rng);
        let rot = crate::scene::quat_to_matrix(q);
        let mean_axis = obj.semi_axes.iter().sum::<f64>() / 3.0;
        let size = 0.9 * mean_axis / (per as f64).cbrt();
        for _ in 0..per {
            let u = loop {
                let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    break u;
                }
            };
            let local: [f64; 3] = std::array::from_fn(|k| u[k] * obj.semi_axes[k]);
            let p: [f64; 3] = std::array::from_fn(|r| {
                obj.center[r] + (0..3).map(|c| rot[r][c] * local[c]).sum::<f64>()
            });
            let shade = rng.gen_range(-0.06..0.06);
            let g = Gaussian {
                position: p.map(|v| v as f32),
                rotation: random_rotation(rng).map(|v| v as f32),
                log_scale: [0; 3].map(|_| (size * rng.gen_range(0.7..1.3)).ln() as f32),
                opacity_raw: crate::real::logit(0.9f32),
                color: obj.color.map(|c| (c + shade).clamp(0.0, 1.0) as f32),
                semantic: vec![0.0; SEMANTIC_DIM],
                uncertainty_raw: UNCERTAINTY_RAW_INIT as f32,
            };
            cloud.push(g, id as u32);
        }
    }
    cloud
}

/// Centroid and bounding-sphere radius of the objects (or of the bounds when empty).
pub fn scene_sphere(spec: &SceneSpec, objects: &[ObjectShape]) -> ([f64; 3], f64) {
    if objects.is_empty() {
        let [lo, hi] = spec.bounds;
        let c = std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]));
        let r = (0..3).map(|k| (0.5 * (hi[k] - lo[k])).powi(2)).sum::<f64>().sqrt();
        return (c, r);
    }
    let n = objects.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|k| objects.iter().map(|o| o.center[k]).sum::<f64>() / n);
    let r = objects
        .iter()
        .map(|o| {
            let d: f64 = (0..3).map(|k| (o.center[k] - c[k]).powi(2)).sum::<f64>().sqrt();
            d + o.semi_axes.iter().copied().fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    (c, r)
}

/// Cameras on an upper-hemisphere spiral, all aimed at the scene centroid.
pub fn hemisphere_cameras(
    center: [f64; 3],
    radius: f64,
    count: usize,
    (width, height): (usize, usize),
) -> Result<Vec<Camera>> {
    let dist = CAMERA_DISTANCE_FACTOR * radius;
    // The bounding sphere subtends asin(1/1.5) from the camera; add a margin.
    let fov_y = 2.0 * (1.0 / CAMERA_DISTANCE_FACTOR).asin() * 1.05;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let t = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.5 };
            let elev = (10.0 + 55.0 * t).to_radians();
            let azim = i as f64 * golden;
            let eye = [
                center[0] + dist * elev.cos() * azim.cos(),
                center[1] + dist * elev.cos() * azim.sin(),
                center[2] + dist * elev.sin(),
            ];
            Camera::look_at(eye, center, [0.0, 0.0, 1.0], width, height, fov_y)
        })
        .collect()
}

/// Builds a scene deterministically from `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let clips = separated_embeddings(spec.object_count + 1, spec.d_clip, &mut rng)?;
    let mut embeddings: Vec<LabelEmbedding> = clips
        .into_iter()
        .map(|clip| LabelEmbedding {
            clip,
            dino: random_unit(&mut rng, spec.d_dino),
        })
        .collect();
    let background_embedding = embeddings.remove(0);
    let objects = place_objects(spec, &mut rng)?;
    let gaussians = object_gaussians(spec, &objects, &mut rng);
    let (center, radius) = scene_sphere(spec, &objects);
    let cameras = hemisphere_cameras(center, radius, spec.camera_count, spec.image_size)?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        gaussians,
        objects,
        labels: embeddings,
        background_embedding,
        cameras,
        background: [0.0; 3],
    })
}

impl SyntheticScene {
    /// Cloud holding only the Gaussians of object `label`.
    pub fn object_cloud(&self, label: u32) -> GaussianCloud<f32> {
        let mut c = self.gaussians.clone();
        let keep: Vec<bool> = c.labels.iter().map(|&l| l == label).collect();
        c.retain_mask(&keep);
        c
    }

    /// A deliberately rough starting cloud for training: jittered copies of
    /// the ground-truth positions with grey colour, isotropic scales, low
    /// opacity and small random semantics. Random semantics matter: with
    /// all-zero inputs the decoder's ReLU layers pass no gradient back.
    pub fn initial_cloud(&self, count: usize, seed: u64) -> GaussianCloud<f32> {
        let mut rng = stream_rng(seed, 7);
        let src = &self.gaussians;
        let mut cloud = GaussianCloud::new(SEMANTIC_DIM);
        if src.is_empty() {
            return cloud;
        }
        let (_, radius) = scene_sphere(&self.spec, &self.objects);
        let spacing = radius / (count.max(1) as f64).cbrt();
        for _ in 0..count {
            let i = rng.gen_range(0..src.len());
            let p = src.positions[i];
            let g = Gaussian {
                position: std::array::from_fn(|k| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    p[k] + (0.3 * spacing * n) as f32
                }),
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [(0.5 * spacing).ln() as f32; 3],
                opacity_raw: crate::real::logit(0.1f32),
                color: [0.5; 3],
                semantic: (0..SEMANTIC_DIM)
                    .map(|_| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        (SEMANTIC_INIT_SIGMA * n) as f32
                    })
                    .collect(),
                uncertainty_raw: UNCERTAINTY_RAW_INIT as f32,
            };
            cloud.push(g, src.labels[i]);
        }
        cloud
    }

    /// Per-object embedding actually shown to camera `view`.
    pub fn view_embeddings(&self, view: usize, noise: &NoiseConfig) -> Vec<LabelEmbedding> {
        self.labels
            .iter()
            .enumerate()
            .map(|(label, e)| {
                let mut rng = stream_rng(self.spec.seed, 1 + (view as u64) * 65_536 + label as u64);
                if noise.inconsistent_labels.contains(&(label as u32)) {
                    LabelEmbedding {
                        clip: random_unit(&mut rng, e.clip.len()),
                        dino: random_unit(&mut rng, e.dino.len()),
                    }
                } else {
                    LabelEmbedding {
                        clip: jitter(&e.clip, noise.view_jitter_sigma, &mut rng),
                        dino: jitter(&e.dino, noise.view_jitter_sigma, &mut rng),
                    }
                }
            })
            .collect()
    }
}

/// RGB image and per-pixel object labels from `camera`.
///
/// A pixel takes the label of the nearest object (by expected depth) whose
/// own rendering, with every other object removed, reaches alpha above 0.5.
pub fn render_ground_truth(scene: &SyntheticScene, camera: &Camera) -> Result<(Image<f32>, LabelMap)> {
    let settings = RasterSettings::with_background(scene.background);
    let rgb = rasterize(&scene.gaussians, camera, &settings)?.color;
    let mut labels = LabelMap::background(camera.width, camera.height);
    let mut best_depth = vec![f32::INFINITY; camera.pixel_count()];
    for label in 0..scene.objects.len() {
        let out = rasterize(&scene.object_cloud(label as u32), camera, &settings)?;
        for (i, (&a, &d)) in out.alpha.data.iter().zip(&out.depth.data).enumerate() {
            if (a as f64) > LABEL_ALPHA_THRESHOLD {
                let depth = d / a;
                if depth < best_depth[i] {
                    best_depth[i] = depth;
                    labels.labels[i] = label as u16;
                }
            }
        }
    }
    Ok((rgb, labels))
}

/// Per-label pixel counts in a clipped `(2r+1)²` window, via integral images.
struct WindowCounts {
    width: usize,
    height: usize,
    radius: usize,
    /// `(width+1)·(height+1)` prefix sums per label slot.
    sums: Vec<Vec<u32>>,
}

impl WindowCounts {
    fn new(slots: &[usize], slot_count: usize, width: usize, height: usize, radius: usize) -> Self {
        let stride = width + 1;
        let mut sums = vec![vec![0u32; stride * (height + 1)]; slot_count];
        for (s, table) in sums.iter_mut().enumerate() {
            for y in 0..height {
                let mut row = 0u32;
                for x in 0..width {
                    row += (slots[y * width + x] == s) as u32;
                    table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
                }
            }
        }
        Self {
            width,
            height,
            radius,
            sums,
        }
    }

    fn count(&self, slot: usize, x: usize, y: usize) -> u32 {
        let r = self.radius;
        let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
        let (x1, y1) = ((x + r + 1).min(self.width), (y + r + 1).min(self.height));
        let s = self.width + 1;
        let t = &self.sums[slot];
        t[y1 * s + x1] + t[y0 * s + x0] - t[y0 * s + x1] - t[y1 * s + x0]
    }
}

/// Hybrid features for one view: each pixel's label embedding, box-blurred
/// across labels and renormalized per slice.
pub fn extract_features(
    scene: &SyntheticScene,
    view: usize,
    labels: &LabelMap,
    noise: &NoiseConfig,
) -> Result<HybridFeatureMap<f32>> {
    let spec = &scene.spec;
    let (w, h) = (labels.width, labels.height);
    let mut table = scene.view_embeddings(view, noise);
    table.push(scene.background_embedding.clone());
    let bg_slot = table.len() - 1;
    let slots: Vec<usize> = labels
        .labels
        .iter()
        .map(|&l| {
            if l == LabelMap::BACKGROUND {
                Ok(bg_slot)
            } else if (l as usize) < bg_slot {
                Ok(l as usize)
            } else {
                Err(Error::InvalidSpec(format!("label map holds unknown label {l}")))
            }
        })
        .collect::<Result<_>>()?;
    let clip_counts = WindowCounts::new(&slots, table.len(), w, h, noise.boundary_blur_px);
    let dino_counts = WindowCounts::new(&slots, table.len(), w, h, noise.dino_blur_px);
    let d = spec.dim();
    let mut data = vec![0f32; w * h * d];
    data.par_chunks_mut(w * d).enumerate().for_each(|(y, row)| {
        let mut clip = vec![0.0f64; spec.d_clip];
        let mut dino = vec![0.0f64; spec.d_dino];
        for x in 0..w {
            let own = &table[slots[y * w + x]];
            blend(&clip_counts, &table, x, y, |e| &e.clip, &own.clip, &mut clip);
            blend(&dino_counts, &table, x, y, |e| &e.dino, &own.dino, &mut dino);
            let out = &mut row[x * d..(x + 1) * d];
            for (o, &v) in out.iter_mut().zip(clip.iter().chain(&dino)) {
                *o = v as f32;
            }
        }
    });
    HybridFeatureMap::new(spec.d_clip, spec.d_dino, Image::from_vec(w, h, d, data)?)
}

fn blend(
    counts: &WindowCounts,
    table: &[LabelEmbedding],
    x: usize,
    y: usize,
    part: impl Fn(&LabelEmbedding) -> &Vec<f64>,
    own: &[f64],
    out: &mut [f64],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut present = 0;
    for (slot, e) in table.iter().enumerate() {
        let c = counts.count(slot, x, y);
        if c > 0 {
            present += 1;
            for (o, &v) in out.iter_mut().zip(part(e)) {
                *o += c as f64 * v;
            }
        }
    }
    // A single-label window reproduces the embedding exactly; so does the
    // (measure-zero) case of a mixture that cancels out.
    if present <= 1 || normalize_in_place(out) <= 1e-12 {
        out.copy_from_slice(own);
    }
}

/// Renders ground truth and extracts features for every camera of the scene.
pub fn build_views(scene: &SyntheticScene) -> Result<Vec<View>> {
    scene
        .cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let (rgb, labels) = render_ground_truth(scene, cam)?;
            let features = extract_features(scene, i, &labels, &scene.spec.noise)?;
            Ok(View {
                camera: cam.clone(),
                rgb,
                labels,
                features,
            })
        })
        .collect()
}
