//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

pub mod checks;
pub mod quant;
#[allow(unused_imports)]
pub use checks::*;

use legaussians::image::Image;
use legaussians::raster::{project, RenderOutput, MAX_ALPHA, MIN_ALPHA, MIN_TRANSMITTANCE};
use legaussians::scene::{materialize, Camera, Gaussian, GaussianCloud, SEMANTIC_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera 4 units from the origin looking at it.
pub fn test_camera(width: usize, height: usize, rng: &mut impl Rng) -> Camera {
    let az: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let el: f64 = rng.gen_range(-0.6..0.6);
    let eye = [4.0 * el.cos() * az.cos(), 4.0 * el.cos() * az.sin(), 4.0 * el.sin()];
    Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], width, height, 0.9).unwrap()
}

pub fn random_gaussian(rng: &mut impl Rng, spread: f64, sem_dim: usize) -> Gaussian<f64> {
    Gaussian {
        position: [0; 3].map(|_| rng.gen_range(-spread..spread)),
        rotation: [0; 4].map(|_| rng.gen_range(-1.0..1.0)),
        log_scale: [0; 3].map(|_| rng.gen_range(-1.6f64..-0.4)),
        opacity_raw: rng.gen_range(-1.0..2.0),
        color: [0; 3].map(|_| rng.gen_range(0.0..1.0)),
        semantic: (0..sem_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        uncertainty_raw: rng.gen_range(-2.0..2.0),
    }
}

pub fn random_cloud(rng: &mut impl Rng, n: usize, spread: f64) -> GaussianCloud<f64> {
    let mut cloud = GaussianCloud::new(SEMANTIC_DIM);
    for i in 0..n {
        cloud.push(random_gaussian(rng, spread, SEMANTIC_DIM), i as u32);
    }
    cloud
}

/// Tiling-free reference renderer: every projected Gaussian is tested at
/// every pixel in global depth order.
pub fn brute_force_render(cloud: &GaussianCloud<f64>, cam: &Camera, bg: [f64; 3]) -> RenderOutput<f64> {
    let d = cloud.sem_dim;
    let mut splats = Vec::new();
    for i in 0..cloud.len() {
        let g = materialize(&cloud.get(i)).unwrap();
        if let Some(mut p) = project(&g, cam) {
            p.id = i;
            splats.push((p, g));
        }
    }
    splats.sort_by(|a, b| a.0.depth.partial_cmp(&b.0.depth).unwrap().then(a.0.id.cmp(&b.0.id)));
    let (w, h) = (cam.width, cam.height);
    let mut out = RenderOutput::zeros(w, h, d);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut color = [0.0; 3];
            let mut sem = vec![0.0; d];
            let (mut unc, mut depth) = (0.0, 0.0);
            for (p, g) in &splats {
                let dx = px - p.mean[0];
                let dy = py - p.mean[1];
                let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
                let alpha = (p.opacity * (-0.5 * q).exp()).min(MAX_ALPHA);
                if alpha < MIN_ALPHA {
                    continue;
                }
                if t * (1.0 - alpha) < MIN_TRANSMITTANCE {
                    break;
                }
                let wgt = alpha * t;
                for c in 0..3 {
                    color[c] += wgt * g.color[c];
                }
                for k in 0..d {
                    sem[k] += wgt * g.semantic[k];
                }
                unc += wgt * g.uncertainty;
                depth += wgt * p.depth;
                t *= 1.0 - alpha;
            }
            for c in 0..3 {
                out.color.pixel_mut(x, y)[c] = color[c] + t * bg[c];
            }
            out.semantic.pixel_mut(x, y).copy_from_slice(&sem);
            out.uncertainty.pixel_mut(x, y)[0] = unc;
            out.depth.pixel_mut(x, y)[0] = depth;
            out.alpha.pixel_mut(x, y)[0] = 1.0 - t;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Relative-error floor used by every finite-difference comparison.
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

/// Central finite differences of `f` around `x`.
pub fn central_diff(x: &[f64], f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    central_diff_step(x, FD_STEP, f)
}

/// Central differences with an explicit step.
pub fn central_diff_step(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + step;
            let fp = f(&xp);
            xp[i] = orig - step;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Worst relative error between analytic and numeric gradients.
pub fn worst_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, FD_FLOOR))
        .fold(0.0, f64::max)
}

/// Flattens cloud parameters in the same order as `GaussianGrads::flatten`.
pub fn flatten_cloud(cloud: &GaussianCloud<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..cloud.len() {
        out.extend_from_slice(&cloud.positions[i]);
        out.extend_from_slice(&cloud.rotations[i]);
        out.extend_from_slice(&cloud.log_scales[i]);
        out.push(cloud.opacity_raw[i]);
        out.extend_from_slice(&cloud.colors[i]);
        out.extend_from_slice(cloud.semantic(i));
        out.push(cloud.uncertainty_raw[i]);
    }
    out
}

pub fn unflatten_cloud(template: &GaussianCloud<f64>, x: &[f64]) -> GaussianCloud<f64> {
    let mut cloud = template.clone();
    let d = cloud.sem_dim;
    let mut it = x.iter().copied();
    for i in 0..cloud.len() {
        for v in cloud.positions[i].iter_mut() {
            *v = it.next().unwrap();
        }
        for v in cloud.rotations[i].iter_mut() {
            *v = it.next().unwrap();
        }
        for v in cloud.log_scales[i].iter_mut() {
            *v = it.next().unwrap();
        }
        cloud.opacity_raw[i] = it.next().unwrap();
        for v in cloud.colors[i].iter_mut() {
            *v = it.next().unwrap();
        }
        for k in 0..d {
            cloud.semantics[i * d + k] = it.next().unwrap();
        }
        cloud.uncertainty_raw[i] = it.next().unwrap();
    }
    cloud
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Image<f64> {
    Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random upstream gradients for every render channel.
pub fn random_upstream(rng: &mut impl Rng, w: usize, h: usize, d: usize) -> RenderOutput<f64> {
    RenderOutput {
        color: random_image(rng, w, h, 3),
        semantic: random_image(rng, w, h, d),
        uncertainty: random_image(rng, w, h, 1),
        alpha: random_image(rng, w, h, 1),
        depth: random_image(rng, w, h, 1),
    }
}

/// `Σ upstream ⊙ render` over every channel.
pub fn weighted_sum(out: &RenderOutput<f64>, up: &RenderOutput<f64>) -> f64 {
    let dot = |a: &Image<f64>, b: &Image<f64>| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
    dot(&out.color, &up.color)
        + dot(&out.semantic, &up.semantic)
        + dot(&out.uncertainty, &up.uncertainty)
        + dot(&out.alpha, &up.alpha)
        + dot(&out.depth, &up.depth)
}
