//! Adaptive density control: prune transparent Gaussians, split large ones
//! and clone small ones that keep receiving large screen-space gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::raster::GaussianGrads;
use crate::real::Real;
use crate::scene::{normalize_quat, quat_to_matrix, GaussianCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub enabled: bool,
    /// Gaussians whose opacity falls below this are removed.
    pub prune_opacity: f64,
    /// Threshold on the mean screen-space position gradient, in normalized
    /// device units (pixel gradients are scaled by half the image size).
    pub grad_threshold: f64,
    /// Splitting happens above this largest-axis scale, as a fraction of the scene extent.
    pub percent_dense: f64,
    pub split_factor: f64,
    pub interval: usize,
    pub start: usize,
    /// Last iteration that may densify; `None` means half the run.
    pub until: Option<usize>,
    pub max_gaussians: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            prune_opacity: 0.005,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            split_factor: 1.6,
            interval: 100,
            start: 200,
            until: None,
            max_gaussians: 20_000,
        }
    }
}

/// Screen-space gradient magnitudes accumulated between density steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self { sum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    /// Adds one view's gradients for every Gaussian visible in it.
    pub fn record<T: Real>(&mut self, grads: &GaussianGrads<T>, width: usize, height: usize) {
        let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
        for (i, (&vis, g)) in grads.visible.iter().zip(&grads.mean2d).enumerate() {
            if vis {
                let (gx, gy) = (g[0].to_f64_lossy() * sx, g[1].to_f64_lossy() * sy);
                self.sum[i] += (gx * gx + gy * gy).sqrt();
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

/// What a density step did. Surviving original rows keep their order and are
/// followed by `added` new rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityOutcome {
    pub keep: Vec<bool>,
    pub added: usize,
    pub pruned: usize,
    pub split: usize,
    pub cloned: usize,
}

impl DensityOutcome {
    pub fn unchanged(&self) -> bool {
        self.added == 0 && self.keep.iter().all(|&k| k)
    }
}

/// One density-control step on `cloud`. `extent` is the scene radius.
pub fn density_control(
    cloud: &mut GaussianCloud<f32>,
    stats: &GradStats,
    cfg: &DensityConfig,
    extent: f64,
    rng: &mut impl Rng,
) -> DensityOutcome {
    let n = cloud.len();
    assert_eq!(stats.len(), n, "gradient statistics length");
    let mut keep: Vec<bool> = (0..n).map(|i| f64::from(cloud.opacity(i)) >= cfg.prune_opacity).collect();
    let pruned = keep.iter().filter(|&&k| !k).count();
    let mut budget = cfg.max_gaussians.saturating_sub(n - pruned);
    let big = cfg.percent_dense * extent;
    let shrink = (cfg.split_factor as f32).ln();
    let (mut split, mut cloned) = (0, 0);
    let mut children = Vec::new();
    for i in 0..n {
        if !keep[i] || stats.mean(i) < cfg.grad_threshold || budget == 0 {
            continue;
        }
        let parent = cloud.get(i);
        let label = cloud.labels[i];
        let max_scale = parent.log_scale.iter().map(|&s| f64::from(s).exp()).fold(0.0, f64::max);
        if max_scale > big {
            let r = quat_to_matrix(normalize_quat(parent.rotation).0);
            let scale = parent.log_scale.map(f32::exp);
            for _ in 0..2 {
                let z: [f32; 3] = std::array::from_fn(|k| scale[k] * rng.sample::<f32, _>(StandardNormal));
                let mut child = parent.clone();
                for a in 0..3 {
                    child.position[a] += (0..3).map(|b| r[a][b] * z[b]).sum::<f32>();
                }
                child.log_scale = parent.log_scale.map(|s| s - shrink);
                children.push((child, label));
            }
            keep[i] = false;
            split += 1;
            budget -= 1;
        } else {
            children.push((parent, label));
            cloned += 1;
            budget -= 1;
        }
    }
    let added = children.len();
    cloud.retain_mask(&keep);
    for (g, label) in children {
        cloud.push(g, label);
    }
    DensityOutcome { keep, added, pruned, split, cloned }
}
