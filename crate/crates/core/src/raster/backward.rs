use rayon::prelude::*;

use super::forward::{raw_alpha, FrameState, RenderOutput};
use super::project::{screen_covariance, screen_transform, MIN_ALPHA};
use super::MAX_ALPHA;
use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};
use crate::scene::{
    covariance_from, normalize_quat, quat_to_matrix, quat_to_matrix_vjp, GaussianCloud,
};

/// Selects which output channels may push gradients into geometry and
/// opacity (through the blending weights and depth). Value gradients
/// (colour, semantic feature, uncertainty) always flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    pub color: bool,
    pub semantic: bool,
    pub uncertainty: bool,
    pub alpha: bool,
    pub depth: bool,
}

impl ChannelMask {
    pub const ALL: ChannelMask = ChannelMask {
        color: true,
        semantic: true,
        uncertainty: true,
        alpha: true,
        depth: true,
    };

    /// Semantic and uncertainty losses reach only `s_G` and `u`.
    pub const ISOLATED: ChannelMask = ChannelMask {
        color: true,
        semantic: false,
        uncertainty: false,
        alpha: true,
        depth: true,
    };
}

impl Default for ChannelMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// Gradients for every raw Gaussian parameter, laid out like the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads<T = f32> {
    pub sem_dim: usize,
    pub positions: Vec<[T; 3]>,
    pub rotations: Vec<[T; 4]>,
    pub log_scales: Vec<[T; 3]>,
    pub opacity_raw: Vec<T>,
    pub colors: Vec<[T; 3]>,
    pub semantics: Vec<T>,
    pub uncertainty_raw: Vec<T>,
    /// Screen-space mean gradient (pixels); used for densification statistics.
    pub mean2d: Vec<[T; 2]>,
    pub visible: Vec<bool>,
}

impl<T: Real> GaussianGrads<T> {
    pub fn zeros(n: usize, sem_dim: usize) -> Self {
        Self {
            sem_dim,
            positions: vec![[T::zero(); 3]; n],
            rotations: vec![[T::zero(); 4]; n],
            log_scales: vec![[T::zero(); 3]; n],
            opacity_raw: vec![T::zero(); n],
            colors: vec![[T::zero(); 3]; n],
            semantics: vec![T::zero(); n * sem_dim],
            uncertainty_raw: vec![T::zero(); n],
            mean2d: vec![[T::zero(); 2]; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// All parameter gradients flattened in a fixed order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            out.extend_from_slice(&self.positions[i]);
            out.extend_from_slice(&self.rotations[i]);
            out.extend_from_slice(&self.log_scales[i]);
            out.push(self.opacity_raw[i]);
            out.extend_from_slice(&self.colors[i]);
            out.extend_from_slice(&self.semantics[i * self.sem_dim..(i + 1) * self.sem_dim]);
            out.push(self.uncertainty_raw[i]);
        }
        out
    }
}

/// Layout of a per-splat accumulator: mean(2), conic(3), opacity(1), values(stride).
const ACC_HEAD: usize = 6;

/// Analytic gradients of the blending and projection chain.
///
/// Accumulation happens per tile into private buffers which are then reduced
/// in tile order, so results do not depend on the thread count.
pub fn rasterize_backward<T: Real>(
    state: &FrameState<T>,
    cloud: &GaussianCloud<T>,
    upstream: &RenderOutput<T>,
    mask: ChannelMask,
) -> Result<GaussianGrads<T>> {
    let (w, h) = (state.cam.width, state.cam.height);
    let d = state.sem_dim;
    if cloud.len() != state.gaussian_count || cloud.sem_dim != d {
        return Err(Error::DimensionMismatch {
            what: "cloud vs frame state",
            expected: state.gaussian_count,
            found: cloud.len(),
        });
    }
    let shapes = [
        (&upstream.color, 3usize),
        (&upstream.semantic, d),
        (&upstream.uncertainty, 1),
        (&upstream.alpha, 1),
        (&upstream.depth, 1),
    ];
    for (img, ch) in shapes {
        if img.width != w || img.height != h || img.channels != ch {
            return Err(Error::DimensionMismatch {
                what: "upstream gradient image",
                expected: w * h * ch,
                found: img.width * img.height * img.channels,
            });
        }
    }

    let stride = state.stride();
    let acc_stride = ACC_HEAD + stride;
    let n_tiles = state.tiles_x * state.tiles_y;
    let tile_acc: Vec<Vec<T>> = (0..n_tiles)
        .into_par_iter()
        .map(|tile| backward_tile(state, upstream, mask, tile, acc_stride))
        .collect();

    // Fixed-order reduction.
    let mut acc = vec![T::zero(); state.splats.len() * acc_stride];
    for (tile, local) in tile_acc.iter().enumerate() {
        for (j, &si) in state.tile_list(tile).iter().enumerate() {
            let dst = &mut acc[si as usize * acc_stride..(si as usize + 1) * acc_stride];
            for (a, &b) in dst.iter_mut().zip(&local[j * acc_stride..(j + 1) * acc_stride]) {
                *a += b;
            }
        }
    }

    let per_splat: Vec<SplatGrad<T>> = state
        .splats
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            splat_param_grads(
                state,
                cloud,
                s.id,
                &acc[k * acc_stride..(k + 1) * acc_stride],
            )
        })
        .collect();

    let mut grads = GaussianGrads::zeros(cloud.len(), d);
    for (s, g) in state.splats.iter().zip(per_splat) {
        let i = s.id;
        grads.positions[i] = g.position;
        grads.rotations[i] = g.rotation;
        grads.log_scales[i] = g.log_scale;
        grads.opacity_raw[i] = g.opacity_raw;
        grads.colors[i] = g.color;
        grads.semantics[i * d..(i + 1) * d].copy_from_slice(&g.semantic);
        grads.uncertainty_raw[i] = g.uncertainty_raw;
        grads.mean2d[i] = g.mean2d;
        grads.visible[i] = true;
    }
    Ok(grads)
}

fn backward_tile<T: Real>(
    state: &FrameState<T>,
    upstream: &RenderOutput<T>,
    mask: ChannelMask,
    tile: usize,
    acc_stride: usize,
) -> Vec<T> {
    let list = state.tile_list(tile);
    let mut acc = vec![T::zero(); list.len() * acc_stride];
    if list.is_empty() {
        return acc;
    }
    let d = state.sem_dim;
    let stride = state.stride();
    let w = state.cam.width;
    let (xs, ys) = state.tile_pixels(tile);
    let half = T::lit(0.5);
    let one = T::one();
    let max_alpha = T::lit(MAX_ALPHA);
    let min_alpha = T::lit(MIN_ALPHA);

    // Channels whose upstream reaches the blending weights.
    let mut geo = vec![false; stride];
    geo[..3].fill(mask.color);
    geo[3..3 + d].fill(mask.semantic);
    geo[3 + d] = mask.uncertainty;
    geo[4 + d] = mask.depth;

    let mut dpix = vec![T::zero(); stride];
    let mut accum = vec![T::zero(); stride];
    let mut last_v = vec![T::zero(); stride];
    for y in ys {
        for x in xs.clone() {
            let pix = y * w + x;
            let n = state.n_contrib[pix] as usize;
            if n == 0 {
                continue;
            }
            dpix[..3].copy_from_slice(&upstream.color.data[pix * 3..pix * 3 + 3]);
            dpix[3..3 + d].copy_from_slice(&upstream.semantic.data[pix * d..(pix + 1) * d]);
            dpix[3 + d] = upstream.uncertainty.data[pix];
            dpix[4 + d] = upstream.depth.data[pix];
            let d_alpha_out = if mask.alpha {
                upstream.alpha.data[pix]
            } else {
                T::zero()
            };
            let t_final = state.final_t[pix];
            let bg_dot = if mask.color {
                (0..3).map(|c| state.background[c] * dpix[c]).sum()
            } else {
                T::zero()
            };
            let px = T::from_usize(x).unwrap() + half;
            let py = T::from_usize(y).unwrap() + half;
            accum.fill(T::zero());
            last_v.fill(T::zero());
            let mut last_alpha = T::zero();
            let mut t = t_final;
            for j in (0..n).rev() {
                let si = list[j] as usize;
                let s = &state.splats[si];
                let Some((raw, dx, dy)) = raw_alpha(s, px, py) else {
                    continue;
                };
                let alpha = raw.min(max_alpha);
                if alpha < min_alpha {
                    continue;
                }
                t /= one - alpha;
                let wgt = alpha * t;
                let v = &state.values[si * stride..(si + 1) * stride];
                let a = &mut acc[j * acc_stride..(j + 1) * acc_stride];
                let mut d_alpha = T::zero();
                for c in 0..stride {
                    a[ACC_HEAD + c] += wgt * dpix[c];
                    if geo[c] {
                        accum[c] = last_alpha * last_v[c] + (one - last_alpha) * accum[c];
                        d_alpha += (v[c] - accum[c]) * dpix[c];
                    }
                }
                d_alpha *= t;
                d_alpha += (d_alpha_out - bg_dot) * t_final / (one - alpha);
                last_alpha = alpha;
                last_v.copy_from_slice(v);
                if raw > max_alpha {
                    continue;
                }
                let gauss = raw / s.opacity;
                a[5] += gauss * d_alpha;
                let d_power = alpha * d_alpha;
                let (ca, cb, cc) = (s.conic[0], s.conic[1], s.conic[2]);
                // power = −½(a·dx² + c·dy²) − b·dx·dy, with dx = px − mean_x.
                a[0] += d_power * (ca * dx + cb * dy);
                a[1] += d_power * (cb * dx + cc * dy);
                a[2] += -half * dx * dx * d_power;
                a[3] += -dx * dy * d_power;
                a[4] += -half * dy * dy * d_power;
            }
        }
    }
    acc
}

struct SplatGrad<T> {
    position: [T; 3],
    rotation: [T; 4],
    log_scale: [T; 3],
    opacity_raw: T,
    color: [T; 3],
    semantic: Vec<T>,
    uncertainty_raw: T,
    mean2d: [T; 2],
}

fn splat_param_grads<T: Real>(
    state: &FrameState<T>,
    cloud: &GaussianCloud<T>,
    i: usize,
    acc: &[T],
) -> SplatGrad<T> {
    let cam = &state.cam;
    let d = state.sem_dim;
    let two = T::lit(2.0);
    let vals = &acc[ACC_HEAD..];

    let color = [vals[0], vals[1], vals[2]];
    let semantic = vals[3..3 + d].to_vec();
    let u = sigmoid(cloud.uncertainty_raw[i]);
    let uncertainty_raw = vals[3 + d] * u * (T::one() - u);
    let d_depth = vals[4 + d];

    let alpha0 = sigmoid(cloud.opacity_raw[i]);
    let opacity_raw = acc[5] * alpha0 * (T::one() - alpha0);

    // Recompute the projection chain.
    let (q, qn) = normalize_quat(cloud.rotations[i]);
    let rot = quat_to_matrix(q);
    let scale = cloud.log_scales[i].map(|v| v.exp());
    let cov = covariance_from(&rot, scale);
    let t = cam.to_camera(cloud.positions[i]);
    let tm = screen_transform(cam, t);
    let cov2d = screen_covariance(&tm, &cov);

    // conic = inverse(cov2d)
    let (ca, cb, cc) = (cov2d[0], cov2d[1], cov2d[2]);
    let det = ca * cc - cb * cb;
    let det2 = det * det;
    let (ga, gb, gc) = (acc[2], acc[3], acc[4]);
    let d_cov_a = (-cc * cc * ga + cb * cc * gb - cb * cb * gc) / det2;
    let d_cov_b = (two * cb * cc * ga - (det + two * cb * cb) * gb + two * ca * cb * gc) / det2;
    let d_cov_c = (-cb * cb * ga + ca * cb * gb - ca * ca * gc) / det2;

    // cov2d = T·Σ·Tᵀ
    let mut d_sigma = [[T::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            d_sigma[r][c] = d_cov_a * tm[0][r] * tm[0][c]
                + d_cov_b * tm[0][r] * tm[1][c]
                + d_cov_c * tm[1][r] * tm[1][c];
        }
    }
    let sig_t = |row: usize| -> [T; 3] {
        let mut o = [T::zero(); 3];
        for r in 0..3 {
            o[r] = (0..3).map(|k| cov[r][k] * tm[row][k]).sum();
        }
        o
    };
    let st0 = sig_t(0);
    let st1 = sig_t(1);
    let mut d_tm = [[T::zero(); 3]; 2];
    for k in 0..3 {
        d_tm[0][k] = two * d_cov_a * st0[k] + d_cov_b * st1[k];
        d_tm[1][k] = d_cov_b * st0[k] + two * d_cov_c * st1[k];
    }
    // T = J·W
    let mut d_j = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for k in 0..3 {
            d_j[r][k] = (0..3).map(|c| d_tm[r][c] * cam.rot[k][c]).sum();
        }
    }
    let iz = T::one() / t[2];
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_t = [T::zero(); 3];
    d_t[0] += d_j[0][2] * (-cam.fx * iz2);
    d_t[1] += d_j[1][2] * (-cam.fy * iz2);
    d_t[2] += d_j[0][0] * (-cam.fx * iz2)
        + d_j[0][2] * (two * cam.fx * t[0] * iz3)
        + d_j[1][1] * (-cam.fy * iz2)
        + d_j[1][2] * (two * cam.fy * t[1] * iz3);
    // mean2d
    let (dmx, dmy) = (acc[0], acc[1]);
    d_t[0] += dmx * cam.fx * iz;
    d_t[1] += dmy * cam.fy * iz;
    d_t[2] += -dmx * cam.fx * t[0] * iz2 - dmy * cam.fy * t[1] * iz2;
    d_t[2] += d_depth;
    let mut position = [T::zero(); 3];
    for c in 0..3 {
        position[c] = (0..3).map(|r| cam.rot[r][c] * d_t[r]).sum();
    }

    // Σ = M·Mᵀ, M = R·diag(s)
    let mut m = [[T::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = rot[r][c] * scale[c];
        }
    }
    let mut d_m = [[T::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            d_m[r][c] = (0..3).map(|k| (d_sigma[r][k] + d_sigma[k][r]) * m[k][c]).sum();
        }
    }
    let mut log_scale = [T::zero(); 3];
    let mut d_rot = [[T::zero(); 3]; 3];
    for c in 0..3 {
        let ds: T = (0..3).map(|r| rot[r][c] * d_m[r][c]).sum();
        log_scale[c] = ds * scale[c];
        for r in 0..3 {
            d_rot[r][c] = d_m[r][c] * scale[c];
        }
    }
    let dq_unit = quat_to_matrix_vjp(q, &d_rot);
    let proj: T = (0..4).map(|k| q[k] * dq_unit[k]).sum();
    let rotation = [0, 1, 2, 3].map(|k| (dq_unit[k] - q[k] * proj) / qn);

    SplatGrad {
        position,
        rotation,
        log_scale,
        opacity_raw,
        color,
        semantic,
        uncertainty_raw,
        mean2d: [dmx, dmy],
    }
}
