//! Gaussian cloud data model, parameter activations and cameras.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};

/// Width of the compact per-Gaussian semantic feature.
pub const SEMANTIC_DIM: usize = 8;

/// Raw value used for freshly initialized uncertainties (sigmoid ≈ 4.5e-5).
pub const UNCERTAINTY_RAW_INIT: f64 = -10.0;

/// Label id used for Gaussians that do not belong to a known object.
pub const UNLABELED: u32 = u32::MAX;

/// One splat's raw, unconstrained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian<T = f32> {
    pub position: [T; 3],
    /// Quaternion `(w, x, y, z)`; normalized before use.
    pub rotation: [T; 4],
    pub log_scale: [T; 3],
    pub opacity_raw: T,
    pub color: [T; 3],
    pub semantic: Vec<T>,
    pub uncertainty_raw: T,
}

/// A materialized Gaussian ready for projection.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGaussian<T = f32> {
    pub position: [T; 3],
    pub covariance: [[T; 3]; 3],
    pub opacity: T,
    pub color: [T; 3],
    pub semantic: Vec<T>,
    pub uncertainty: T,
}

/// Structure-of-arrays Gaussian storage.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud<T = f32> {
    pub sem_dim: usize,
    pub positions: Vec<[T; 3]>,
    pub rotations: Vec<[T; 4]>,
    pub log_scales: Vec<[T; 3]>,
    pub opacity_raw: Vec<T>,
    pub colors: Vec<[T; 3]>,
    /// Row-major `len × sem_dim`.
    pub semantics: Vec<T>,
    pub uncertainty_raw: Vec<T>,
    /// Ground-truth object id per Gaussian (`UNLABELED` when unknown).
    pub labels: Vec<u32>,
}

impl<T: Real> GaussianCloud<T> {
    pub fn new(sem_dim: usize) -> Self {
        Self {
            sem_dim,
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_raw: Vec::new(),
            colors: Vec::new(),
            semantics: Vec::new(),
            uncertainty_raw: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: Gaussian<T>, label: u32) {
        assert_eq!(g.semantic.len(), self.sem_dim, "semantic width");
        self.positions.push(g.position);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.opacity_raw.push(g.opacity_raw);
        self.colors.push(g.color);
        self.semantics.extend_from_slice(&g.semantic);
        self.uncertainty_raw.push(g.uncertainty_raw);
        self.labels.push(label);
    }

    pub fn get(&self, i: usize) -> Gaussian<T> {
        Gaussian {
            position: self.positions[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_raw: self.opacity_raw[i],
            color: self.colors[i],
            semantic: self.semantic(i).to_vec(),
            uncertainty_raw: self.uncertainty_raw[i],
        }
    }

    pub fn semantic(&self, i: usize) -> &[T] {
        &self.semantics[i * self.sem_dim..(i + 1) * self.sem_dim]
    }

    pub fn semantic_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.semantics[i * self.sem_dim..(i + 1) * self.sem_dim]
    }

    pub fn opacity(&self, i: usize) -> T {
        sigmoid(self.opacity_raw[i])
    }

    pub fn uncertainty(&self, i: usize) -> T {
        sigmoid(self.uncertainty_raw[i])
    }

    /// Keeps the Gaussians whose mask entry is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        fn filter<V: Clone>(v: &mut Vec<V>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        filter(&mut self.positions, keep);
        filter(&mut self.rotations, keep);
        filter(&mut self.log_scales, keep);
        filter(&mut self.opacity_raw, keep);
        filter(&mut self.colors, keep);
        filter(&mut self.uncertainty_raw, keep);
        filter(&mut self.labels, keep);
        let d = self.sem_dim;
        let mut sem = Vec::with_capacity(self.semantics.len());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                sem.extend_from_slice(&self.semantics[i * d..(i + 1) * d]);
            }
        }
        self.semantics = sem;
    }

    /// Checks every array length against the Gaussian count.
    pub fn validate_layout(&self) -> Result<()> {
        let n = self.len();
        let checks = [
            ("rotations", self.rotations.len()),
            ("log_scales", self.log_scales.len()),
            ("opacity_raw", self.opacity_raw.len()),
            ("colors", self.colors.len()),
            ("uncertainty_raw", self.uncertainty_raw.len()),
            ("labels", self.labels.len()),
        ];
        for (what, found) in checks {
            if found != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    found,
                });
            }
        }
        if self.semantics.len() != n * self.sem_dim {
            return Err(Error::DimensionMismatch {
                what: "semantics",
                expected: n * self.sem_dim,
                found: self.semantics.len(),
            });
        }
        Ok(())
    }

    /// Returns the id of the first Gaussian holding a non-finite parameter.
    pub fn first_non_finite(&self) -> Option<usize> {
        (0..self.len()).find(|&i| !gaussian_is_finite(self, i))
    }

    pub fn cast<U: Real>(&self) -> GaussianCloud<U> {
        let c = |v: T| U::from_f64(v.to_f64_lossy()).unwrap();
        GaussianCloud {
            sem_dim: self.sem_dim,
            positions: self.positions.iter().map(|p| p.map(c)).collect(),
            rotations: self.rotations.iter().map(|p| p.map(c)).collect(),
            log_scales: self.log_scales.iter().map(|p| p.map(c)).collect(),
            opacity_raw: self.opacity_raw.iter().map(|&v| c(v)).collect(),
            colors: self.colors.iter().map(|p| p.map(c)).collect(),
            semantics: self.semantics.iter().map(|&v| c(v)).collect(),
            uncertainty_raw: self.uncertainty_raw.iter().map(|&v| c(v)).collect(),
            labels: self.labels.clone(),
        }
    }
}

fn gaussian_is_finite<T: Real>(cloud: &GaussianCloud<T>, i: usize) -> bool {
    cloud.positions[i].iter().all(|v| v.is_finite())
        && cloud.rotations[i].iter().all(|v| v.is_finite())
        && cloud.log_scales[i].iter().all(|v| v.is_finite())
        && cloud.opacity_raw[i].is_finite()
        && cloud.colors[i].iter().all(|v| v.is_finite())
        && cloud.semantic(i).iter().all(|v| v.is_finite())
        && cloud.uncertainty_raw[i].is_finite()
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix<T: Real>(q: [T; 4]) -> [[T; 3]; 3] {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = T::lit(2.0);
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// Pulls a gradient on the rotation matrix back to the (unit) quaternion.
pub fn quat_to_matrix_vjp<T: Real>(q: [T; 4], d: &[[T; 3]; 3]) -> [T; 4] {
    let [w, x, y, z] = q;
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let dw = two
        * (-z * d[0][1] + y * d[0][2] + z * d[1][0] - x * d[1][2] - y * d[2][0] + x * d[2][1]);
    let dx = two * (y * d[0][1] + z * d[0][2] + y * d[1][0] - w * d[1][2] + z * d[2][0] + w * d[2][1])
        - four * x * (d[1][1] + d[2][2]);
    let dy = two * (x * d[0][1] + w * d[0][2] + x * d[1][0] + z * d[1][2] - w * d[2][0] + z * d[2][1])
        - four * y * (d[0][0] + d[2][2]);
    let dz = two
        * (-w * d[0][1] + x * d[0][2] + w * d[1][0] + y * d[1][2] + x * d[2][0] + y * d[2][1])
        - four * z * (d[0][0] + d[1][1]);
    [dw, dx, dy, dz]
}

/// Normalizes a raw quaternion, returning the unit quaternion and the raw norm.
pub fn normalize_quat<T: Real>(q: [T; 4]) -> ([T; 4], T) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    (q.map(|v| v / n), n)
}

/// `Σ = R·diag(s)²·Rᵀ`.
pub fn covariance_from<T: Real>(rot: &[[T; 3]; 3], scale: [T; 3]) -> [[T; 3]; 3] {
    let mut m = [[T::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = rot[r][c] * scale[c];
        }
    }
    let mut cov = [[T::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            cov[r][c] = (0..3).map(|k| m[r][k] * m[c][k]).sum();
        }
    }
    cov
}

/// Applies the parameter activations of one Gaussian.
pub fn materialize<T: Real>(g: &Gaussian<T>) -> Result<RenderGaussian<T>> {
    let finite = g.position.iter().all(|v| v.is_finite())
        && g.rotation.iter().all(|v| v.is_finite())
        && g.log_scale.iter().all(|v| v.is_finite())
        && g.opacity_raw.is_finite()
        && g.color.iter().all(|v| v.is_finite())
        && g.semantic.iter().all(|v| v.is_finite())
        && g.uncertainty_raw.is_finite();
    if !finite {
        return Err(Error::NonFinite {
            what: "gaussian parameters",
            index: 0,
        });
    }
    let (q, qn) = normalize_quat(g.rotation);
    if qn <= T::zero() {
        return Err(Error::NonFinite {
            what: "rotation quaternion (zero norm)",
            index: 0,
        });
    }
    let rot = quat_to_matrix(q);
    let scale = g.log_scale.map(|v| v.exp());
    Ok(RenderGaussian {
        position: g.position,
        covariance: covariance_from(&rot, scale),
        opacity: sigmoid(g.opacity_raw),
        color: g.color,
        semantic: g.semantic.clone(),
        uncertainty: sigmoid(g.uncertainty_raw),
    })
}

/// Pinhole camera; extrinsics map world points into an x-right, y-down,
/// z-forward camera frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target` with vertical field of view `fov_y` (radians).
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: usize,
        height: usize,
        fov_y: f64,
    ) -> Result<Self> {
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let cross = |a: [f64; 3], b: [f64; 3]| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let unit = |v: [f64; 3]| {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                Some(v.map(|x| x / n))
            } else {
                None
            }
        };
        let bad = || Error::Config("degenerate look-at frame".into());
        let forward = unit(sub(target, eye)).ok_or_else(bad)?;
        let right = unit(cross(forward, up)).ok_or_else(bad)?;
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let translation = [
            -(rotation[0][0] * eye[0] + rotation[0][1] * eye[1] + rotation[0][2] * eye[2]),
            -(rotation[1][0] * eye[0] + rotation[1][1] * eye[1] + rotation[1][2] * eye[2]),
            -(rotation[2][0] * eye[0] + rotation[2][1] * eye[1] + rotation[2][2] * eye[2]),
        ];
        let fy = 0.5 * height as f64 / (0.5 * fov_y).tan();
        let cam = Camera {
            rotation,
            translation,
            fx: fy,
            fy,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            near: 0.01,
            far: 100.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("camera focal lengths must be positive".into()));
        }
        if !(self.near < self.far) || self.near <= 0.0 {
            return Err(Error::Config("camera requires 0 < near < far".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera image size must be nonzero".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = self.translation;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}
