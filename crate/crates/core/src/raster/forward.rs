use rayon::prelude::*;

use super::project::{pixel_bounds, project_cloud_member, CamParams, Projected2D, MIN_ALPHA};
use super::{MAX_ALPHA, MIN_TRANSMITTANCE, TILE_SIZE};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::real::Real;
use crate::scene::{Camera, GaussianCloud};

#[derive(Clone, Debug, PartialEq)]
pub struct RasterSettings {
    pub tile_size: usize,
    pub background: [f64; 3],
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self {
            tile_size: TILE_SIZE,
            background: [0.0; 3],
        }
    }
}

impl RasterSettings {
    pub fn with_background(background: [f64; 3]) -> Self {
        Self {
            background,
            ..Self::default()
        }
    }
}

/// Every channel produced by one render.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<T = f32> {
    pub color: Image<T>,
    pub semantic: Image<T>,
    pub uncertainty: Image<T>,
    pub alpha: Image<T>,
    pub depth: Image<T>,
}

impl<T: Real> RenderOutput<T> {
    pub fn zeros(width: usize, height: usize, sem_dim: usize) -> Self {
        Self {
            color: Image::zeros(width, height, 3),
            semantic: Image::zeros(width, height, sem_dim),
            uncertainty: Image::zeros(width, height, 1),
            alpha: Image::zeros(width, height, 1),
            depth: Image::zeros(width, height, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

/// Per-frame data retained by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct FrameState<T = f32> {
    pub(crate) cam: CamParams<T>,
    pub(crate) sem_dim: usize,
    pub(crate) splats: Vec<Projected2D<T>>,
    /// Per sorted splat: `[r, g, b, s_0 .. s_{d-1}, u, z]`.
    pub(crate) values: Vec<T>,
    pub(crate) tile_size: usize,
    pub(crate) tiles_x: usize,
    pub(crate) tiles_y: usize,
    pub(crate) tile_offsets: Vec<usize>,
    pub(crate) tile_entries: Vec<u32>,
    pub(crate) final_t: Vec<T>,
    pub(crate) n_contrib: Vec<u32>,
    pub(crate) background: [T; 3],
    pub(crate) gaussian_count: usize,
}

impl<T: Real> FrameState<T> {
    pub(crate) fn stride(&self) -> usize {
        self.sem_dim + 5
    }

    pub(crate) fn tile_list(&self, tile: usize) -> &[u32] {
        &self.tile_entries[self.tile_offsets[tile]..self.tile_offsets[tile + 1]]
    }

    pub(crate) fn tile_pixels(&self, tile: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (
            x0..(x0 + self.tile_size).min(self.cam.width),
            y0..(y0 + self.tile_size).min(self.cam.height),
        )
    }

    /// Number of splats that survived culling.
    pub fn visible_count(&self) -> usize {
        self.splats.len()
    }

    /// Projected splats in blending order.
    pub fn splats(&self) -> &[Projected2D<T>] {
        &self.splats
    }

    /// Final transmittance per pixel.
    pub fn transmittance(&self) -> &[T] {
        &self.final_t
    }
}

/// Alpha of splat `s` at pixel centre `(px, py)` before clamping, or `None`
/// when it is certainly below the 1/255 contribution floor.
#[inline]
pub(crate) fn raw_alpha<T: Real>(s: &Projected2D<T>, px: T, py: T) -> Option<(T, T, T)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let power = -T::lit(0.5) * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    if power < s.power_floor {
        return None;
    }
    Some((s.opacity * power.exp(), dx, dy))
}

pub fn rasterize<T: Real>(
    cloud: &GaussianCloud<T>,
    cam: &Camera,
    settings: &RasterSettings,
) -> Result<RenderOutput<T>> {
    rasterize_with_state(cloud, cam, settings).map(|(out, _)| out)
}

pub fn rasterize_with_state<T: Real>(
    cloud: &GaussianCloud<T>,
    cam: &Camera,
    settings: &RasterSettings,
) -> Result<(RenderOutput<T>, FrameState<T>)> {
    cloud.validate_layout()?;
    if let Some(index) = cloud.first_non_finite() {
        return Err(Error::NonFinite {
            what: "gaussian parameters",
            index,
        });
    }
    cam.validate()?;
    if settings.tile_size == 0 {
        return Err(Error::Config("tile size must be positive".into()));
    }
    let params = CamParams::<T>::new(cam);
    let mut splats: Vec<Projected2D<T>> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| project_cloud_member(cloud, i, &params))
        .collect();
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.id.cmp(&b.id)));

    let d = cloud.sem_dim;
    let stride = d + 5;
    let mut values = Vec::with_capacity(splats.len() * stride);
    for s in &splats {
        values.extend_from_slice(&cloud.colors[s.id]);
        values.extend_from_slice(cloud.semantic(s.id));
        values.push(cloud.uncertainty(s.id));
        values.push(s.depth);
    }

    let (w, h) = (cam.width, cam.height);
    let ts = settings.tile_size;
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let n_tiles = tiles_x * tiles_y;
    let tile_rects: Vec<Option<(usize, usize, usize, usize)>> = splats
        .iter()
        .map(|s| pixel_bounds(s, w, h).map(|(x0, y0, x1, y1)| (x0 / ts, y0 / ts, x1 / ts, y1 / ts)))
        .collect();
    let mut counts = vec![0usize; n_tiles + 1];
    for &(tx0, ty0, tx1, ty1) in tile_rects.iter().flatten() {
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                counts[ty * tiles_x + tx + 1] += 1;
            }
        }
    }
    for t in 0..n_tiles {
        counts[t + 1] += counts[t];
    }
    let tile_offsets = counts;
    let mut fill = tile_offsets.clone();
    let mut tile_entries = vec![0u32; tile_offsets[n_tiles]];
    for (k, rect) in tile_rects.iter().enumerate() {
        if let Some((tx0, ty0, tx1, ty1)) = *rect {
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    let t = ty * tiles_x + tx;
                    tile_entries[fill[t]] = k as u32;
                    fill[t] += 1;
                }
            }
        }
    }

    let background = settings.background.map(T::lit);
    let mut state = FrameState {
        cam: params,
        sem_dim: d,
        splats,
        values,
        tile_size: ts,
        tiles_x,
        tiles_y,
        tile_offsets,
        tile_entries,
        final_t: vec![T::one(); w * h],
        n_contrib: vec![0; w * h],
        background,
        gaussian_count: cloud.len(),
    };

    // Per pixel: stride values followed by the final transmittance.
    let per_pixel = stride + 1;
    let tiles: Vec<(Vec<T>, Vec<u32>)> = (0..n_tiles)
        .into_par_iter()
        .map(|tile| render_tile(&state, tile, per_pixel))
        .collect();

    let mut out = RenderOutput::zeros(w, h, d);
    for (tile, (buf, contrib)) in tiles.into_iter().enumerate() {
        let (xs, ys) = state.tile_pixels(tile);
        let mut k = 0;
        for y in ys.clone() {
            for x in xs.clone() {
                let px = &buf[k * per_pixel..(k + 1) * per_pixel];
                let t_final = px[stride];
                let pix = y * w + x;
                for c in 0..3 {
                    out.color.data[pix * 3 + c] = px[c] + t_final * background[c];
                }
                out.semantic.data[pix * d..(pix + 1) * d].copy_from_slice(&px[3..3 + d]);
                out.uncertainty.data[pix] = px[3 + d];
                out.depth.data[pix] = px[4 + d];
                out.alpha.data[pix] = T::one() - t_final;
                state.final_t[pix] = t_final;
                state.n_contrib[pix] = contrib[k];
                k += 1;
            }
        }
    }
    Ok((out, state))
}

fn render_tile<T: Real>(state: &FrameState<T>, tile: usize, per_pixel: usize) -> (Vec<T>, Vec<u32>) {
    let (xs, ys) = state.tile_pixels(tile);
    let stride = state.stride();
    let list = state.tile_list(tile);
    let n = xs.len() * ys.len();
    let mut buf = vec![T::zero(); n * per_pixel];
    let mut contrib = vec![0u32; n];
    let half = T::lit(0.5);
    let max_alpha = T::lit(MAX_ALPHA);
    let min_alpha = T::lit(MIN_ALPHA);
    let min_t = T::lit(MIN_TRANSMITTANCE);
    let mut k = 0;
    for y in ys {
        for x in xs.clone() {
            let px = T::from_usize(x).unwrap() + half;
            let py = T::from_usize(y).unwrap() + half;
            let acc = &mut buf[k * per_pixel..(k + 1) * per_pixel];
            let mut t = T::one();
            let mut last = 0u32;
            for (j, &si) in list.iter().enumerate() {
                let s = &state.splats[si as usize];
                let Some((a, _, _)) = raw_alpha(s, px, py) else {
                    continue;
                };
                let alpha = a.min(max_alpha);
                if alpha < min_alpha {
                    continue;
                }
                let next_t = t * (T::one() - alpha);
                if next_t < min_t {
                    break;
                }
                let wgt = alpha * t;
                let v = &state.values[si as usize * stride..(si as usize + 1) * stride];
                for (o, &vv) in acc[..stride].iter_mut().zip(v) {
                    *o += wgt * vv;
                }
                t = next_t;
                last = j as u32 + 1;
            }
            acc[stride] = t;
            contrib[k] = last;
            k += 1;
        }
    }
    (buf, contrib)
}
