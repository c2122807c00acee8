//! EWA projection of 3D Gaussians into screen space.

use crate::real::Real;
use crate::scene::{covariance_from, normalize_quat, quat_to_matrix, Camera, GaussianCloud, RenderGaussian};

/// Isotropic screen-space dilation added to every projected covariance (px²).
pub const COV2D_DILATION: f64 = 0.3;

/// Contributions below this alpha are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;

/// Slack on the exponent cutoff, far above the rounding error of `ln`.
const POWER_FLOOR_MARGIN: f64 = 1e-3;

/// A Gaussian after projection to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected2D<T = f32> {
    pub id: usize,
    pub mean: [T; 2],
    /// Upper triangle `(xx, xy, yy)` of the dilated 2D covariance.
    pub cov2d: [T; 3],
    /// Upper triangle of the inverse covariance.
    pub conic: [T; 3],
    /// Camera-space z.
    pub depth: T,
    /// Footprint radius in pixels beyond which alpha < 1/255.
    pub radius: T,
    pub opacity: T,
    /// Exponent below which `opacity·exp(power)` is certainly under 1/255.
    pub power_floor: T,
}

/// Camera parameters converted to the working precision.
#[derive(Clone, Copy, Debug)]
pub(crate) struct CamParams<T> {
    pub rot: [[T; 3]; 3],
    pub trans: [T; 3],
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub near: T,
    pub far: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CamParams<T> {
    pub fn new(cam: &Camera) -> Self {
        let c = T::lit;
        Self {
            rot: cam.rotation.map(|r| r.map(c)),
            trans: cam.translation.map(c),
            fx: c(cam.fx),
            fy: c(cam.fy),
            cx: c(cam.cx),
            cy: c(cam.cy),
            near: c(cam.near),
            far: c(cam.far),
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn to_camera(&self, p: [T; 3]) -> [T; 3] {
        let r = &self.rot;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.trans[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.trans[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.trans[2],
        ]
    }
}

/// Pinhole projection of a camera-space point to pixel coordinates.
pub fn project_point<T: Real>(t: [T; 3], fx: T, fy: T, cx: T, cy: T) -> [T; 2] {
    [fx * t[0] / t[2] + cx, fy * t[1] / t[2] + cy]
}

/// Jacobian of [`project_point`] with respect to the camera-space point.
pub fn projection_jacobian<T: Real>(t: [T; 3], fx: T, fy: T) -> [[T; 3]; 2] {
    let iz = T::one() / t[2];
    let iz2 = iz * iz;
    [
        [fx * iz, T::zero(), -fx * t[0] * iz2],
        [T::zero(), fy * iz, -fy * t[1] * iz2],
    ]
}

/// `J·W` (2×3) for a camera-space mean.
pub(crate) fn screen_transform<T: Real>(cam: &CamParams<T>, t: [T; 3]) -> [[T; 3]; 2] {
    let j = projection_jacobian(t, cam.fx, cam.fy);
    let mut out = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| j[r][k] * cam.rot[k][c]).sum();
        }
    }
    out
}

/// `T·Σ·Tᵀ + dilation·I`, returned as `(xx, xy, yy)`.
pub(crate) fn screen_covariance<T: Real>(tm: &[[T; 3]; 2], cov: &[[T; 3]; 3]) -> [T; 3] {
    let mut st = [[T::zero(); 2]; 3]; // Σ·Tᵀ
    for r in 0..3 {
        for c in 0..2 {
            st[r][c] = (0..3).map(|k| cov[r][k] * tm[c][k]).sum();
        }
    }
    let e = |a: usize, b: usize| -> T { (0..3).map(|k| tm[a][k] * st[k][b]).sum() };
    let dil = T::lit(COV2D_DILATION);
    [e(0, 0) + dil, e(0, 1), e(1, 1) + dil]
}

pub(crate) fn project_parts<T: Real>(
    id: usize,
    position: [T; 3],
    cov: &[[T; 3]; 3],
    opacity: T,
    cam: &CamParams<T>,
) -> Option<Projected2D<T>> {
    let t = cam.to_camera(position);
    if t[2] <= cam.near || t[2] >= cam.far {
        return None;
    }
    if opacity <= T::lit(MIN_ALPHA) {
        return None;
    }
    let tm = screen_transform(cam, t);
    let cov2d = screen_covariance(&tm, cov);
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > T::zero()) {
        return None;
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
    let half = T::lit(0.5);
    let mid = half * (cov2d[0] + cov2d[2]);
    let lambda_max = mid + (mid * mid - det).max(T::zero()).sqrt();
    let radius = (T::lit(2.0) * (T::lit(255.0) * opacity).ln() * lambda_max).sqrt();
    let mean = project_point(t, cam.fx, cam.fy, cam.cx, cam.cy);
    let p = Projected2D {
        id,
        mean,
        cov2d,
        conic,
        depth: t[2],
        radius,
        opacity,
        power_floor: (T::lit(MIN_ALPHA) / opacity).ln() - T::lit(POWER_FLOOR_MARGIN),
    };
    pixel_bounds(&p, cam.width, cam.height).map(|_| p)
}

/// Inclusive pixel-index rectangle `(x0, y0, x1, y1)` whose centres fall inside the footprint.
pub(crate) fn pixel_bounds<T: Real>(
    p: &Projected2D<T>,
    width: usize,
    height: usize,
) -> Option<(usize, usize, usize, usize)> {
    let half = T::lit(0.5);
    let lo_x = (p.mean[0] - p.radius - half).ceil();
    let hi_x = (p.mean[0] + p.radius - half).floor();
    let lo_y = (p.mean[1] - p.radius - half).ceil();
    let hi_y = (p.mean[1] + p.radius - half).floor();
    let w = T::from_usize(width).unwrap();
    let h = T::from_usize(height).unwrap();
    if hi_x < T::zero() || hi_y < T::zero() || lo_x > w - T::one() || lo_y > h - T::one() || lo_x > hi_x || lo_y > hi_y {
        return None;
    }
    let x0 = lo_x.max(T::zero()).to_usize().unwrap();
    let y0 = lo_y.max(T::zero()).to_usize().unwrap();
    let x1 = hi_x.min(w - T::one()).to_usize().unwrap();
    let y1 = hi_y.min(h - T::one()).to_usize().unwrap();
    Some((x0, y0, x1, y1))
}

/// Projects one materialized Gaussian; `None` means culled.
pub fn project<T: Real>(g: &RenderGaussian<T>, cam: &Camera) -> Option<Projected2D<T>> {
    project_parts(0, g.position, &g.covariance, g.opacity, &CamParams::new(cam))
}

/// Materializes and projects Gaussian `i` of a cloud.
pub(crate) fn project_cloud_member<T: Real>(
    cloud: &GaussianCloud<T>,
    i: usize,
    cam: &CamParams<T>,
) -> Option<Projected2D<T>> {
    let (q, _) = normalize_quat(cloud.rotations[i]);
    let rot = quat_to_matrix(q);
    let scale = cloud.log_scales[i].map(|v| v.exp());
    let cov = covariance_from(&rot, scale);
    project_parts(i, cloud.positions[i], &cov, cloud.opacity(i), cam)
}
