//! Training losses with analytic gradients.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::quantizer::IndexMap;
use crate::real::{norm, Real};

/// Weight of the `1 − SSIM` term in the RGB loss.
pub const DSSIM_WEIGHT: f64 = 0.2;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn shape_error(what: &'static str, expected: usize, found: usize) -> Error {
    Error::DimensionMismatch { what, expected, found }
}

/// Uncertainty-weighted cross entropy: `mean_p CE(softmax(logits_p), m_p) · (1 − u_p)`.
///
/// Returns the loss with its gradients with respect to the logits and to `u`.
pub fn semantic_ce_loss<T: Real>(
    logits: &Image<T>,
    targets: &IndexMap,
    u: &Image<T>,
) -> Result<(T, Image<T>, Image<T>)> {
    let (w, h, n) = (logits.width, logits.height, logits.channels);
    if targets.width != w || targets.height != h {
        return Err(shape_error("index map pixels", w * h, targets.width * targets.height));
    }
    if u.width != w || u.height != h || u.channels != 1 {
        return Err(shape_error("uncertainty map pixels", w * h, u.width * u.height * u.channels));
    }
    if let Some(&bad) = targets.indices.iter().find(|&&m| m as usize >= n) {
        return Err(Error::CodebookMismatch {
            context: format!("index map entry {bad}"),
            expected: bad as usize + 1,
            found: n,
        });
    }
    let inv_p = T::one() / T::lit((w * h).max(1) as f64);
    let mut d_logits = Image::zeros(w, h, n);
    let mut d_u = Image::zeros(w, h, 1);
    let mut loss = T::zero();
    for p in 0..w * h {
        let row = &logits.data[p * n..(p + 1) * n];
        let m = targets.indices[p] as usize;
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&l| (l - max).exp()).sum();
        let ce = z.ln() + max - row[m];
        let weight = T::one() - u.data[p];
        loss += ce * weight;
        d_u.data[p] = -ce * inv_p;
        let g = &mut d_logits.data[p * n..(p + 1) * n];
        for (j, gj) in g.iter_mut().enumerate() {
            let sm = (row[j] - max).exp() / z;
            let onehot = if j == m { T::one() } else { T::zero() };
            *gj = (sm - onehot) * weight * inv_p;
        }
    }
    Ok((loss * inv_p, d_logits, d_u))
}

/// Mean uncertainty; the gradient is the constant `1 / pixels`.
pub fn uncertainty_reg<T: Real>(u: &Image<T>) -> (T, Image<T>) {
    let p = u.data.len().max(1);
    let inv = T::one() / T::lit(p as f64);
    let loss = u.data.iter().copied().sum::<T>() * inv;
    (loss, Image::filled(u.width, u.height, u.channels, inv))
}

/// Per-term values of the smoothing loss, for inspection.
pub fn smoothing_terms<T: Real>(s_mlp: &[T], s_g: &[T], u: &[T], w_s: f64, dim: usize) -> (T, T) {
    let g = u.len().max(1);
    let inv = T::one() / T::lit(g as f64);
    let floor = T::lit(w_s);
    let (mut a, mut b) = (T::zero(), T::zero());
    for (i, &ui) in u.iter().enumerate() {
        let diff: Vec<T> = (0..dim).map(|k| s_mlp[i * dim + k] - s_g[i * dim + k]).collect();
        let d = norm(&diff);
        a += d;
        b += ui.max(floor) * d;
    }
    (a * inv, b * inv)
}

/// Smoothing loss `mean_i ‖s_mlp − sg(s_g)‖ + max(sg(u), w_s) · ‖sg(s_mlp) − s_g‖`.
///
/// The first term only sends gradient to `s_mlp`, the second only to `s_g`;
/// `u` receives none. A zero difference has zero gradient.
pub fn smoothing_loss<T: Real>(
    s_mlp: &[T],
    s_g: &[T],
    u: &[T],
    w_s: f64,
    dim: usize,
) -> Result<(T, Vec<T>, Vec<T>)> {
    if s_mlp.len() != u.len() * dim || s_g.len() != u.len() * dim {
        return Err(shape_error("smoothing loss inputs", u.len() * dim, s_mlp.len().min(s_g.len())));
    }
    let inv = T::one() / T::lit(u.len().max(1) as f64);
    let floor = T::lit(w_s);
    let mut d_mlp = vec![T::zero(); s_mlp.len()];
    let mut d_g = vec![T::zero(); s_g.len()];
    let mut loss = T::zero();
    for (i, &ui) in u.iter().enumerate() {
        let r = i * dim..(i + 1) * dim;
        let diff: Vec<T> = s_mlp[r.clone()].iter().zip(&s_g[r.clone()]).map(|(&a, &b)| a - b).collect();
        let d = norm(&diff);
        let weight = ui.max(floor);
        loss += d + weight * d;
        if d > T::zero() {
            for k in 0..dim {
                let unit = diff[k] / d;
                d_mlp[i * dim + k] = unit * inv;
                d_g[i * dim + k] = -weight * unit * inv;
            }
        }
    }
    Ok((loss * inv, d_mlp, d_g))
}

/// Normalized 1-D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable windowed sum of one `w × h` plane; samples outside the image are skipped.
fn filter_plane<T: Real>(plane: &[T], w: usize, h: usize, kernel: &[T]) -> Vec<T> {
    let r = kernel.len() / 2;
    let mut tmp = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (t, &k) in kernel.iter().enumerate() {
                let xx = x as isize + t as isize - r as isize;
                if xx >= 0 && (xx as usize) < w {
                    acc += k * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (t, &k) in kernel.iter().enumerate() {
                let yy = y as isize + t as isize - r as isize;
                if yy >= 0 && (yy as usize) < h {
                    acc += k * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Windowed local statistics of one channel pair.
struct Moments<T> {
    inv_z: Vec<T>,
    mx: Vec<T>,
    my: Vec<T>,
    exx: Vec<T>,
    eyy: Vec<T>,
    exy: Vec<T>,
}

fn moments<T: Real>(x: &[T], y: &[T], w: usize, h: usize, kernel: &[T]) -> Moments<T> {
    let ones = vec![T::one(); w * h];
    let inv_z: Vec<T> = filter_plane(&ones, w, h, kernel).into_iter().map(|z| T::one() / z).collect();
    let norm_filter = |v: &[T]| -> Vec<T> {
        filter_plane(v, w, h, kernel).into_iter().zip(&inv_z).map(|(a, &b)| a * b).collect()
    };
    let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    Moments {
        mx: norm_filter(x),
        my: norm_filter(y),
        exx: norm_filter(&xx),
        eyy: norm_filter(&yy),
        exy: norm_filter(&xy),
        inv_z,
    }
}

fn planes<T: Real>(img: &Image<T>) -> Vec<Vec<T>> {
    (0..img.channels).map(|c| img.channel(c)).collect()
}

/// Mean SSIM over pixels and channels with an 11×11 Gaussian window (σ = 1.5).
///
/// Near the border the window is truncated to the image and renormalized,
/// so constant images have closed-form SSIM everywhere.
pub fn ssim<T: Real>(x: &Image<T>, y: &Image<T>) -> Result<T> {
    Ok(ssim_with_grad(x, y, false)?.0)
}

/// SSIM and, when requested, its gradient with respect to `x`.
pub fn ssim_with_grad<T: Real>(x: &Image<T>, y: &Image<T>, want_grad: bool) -> Result<(T, Option<Image<T>>)> {
    x.same_shape(y)?;
    let (w, h, ch) = (x.width, x.height, x.channels);
    let kernel: Vec<T> = gaussian_window(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(T::lit).collect();
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);
    let count = T::lit((w * h * ch).max(1) as f64);
    let (xp, yp) = (planes(x), planes(y));
    let mut total = T::zero();
    let mut grad = want_grad.then(|| Image::zeros(w, h, ch));
    for c in 0..ch {
        let m = moments(&xp[c], &yp[c], w, h, &kernel);
        let mut g_mu = vec![T::zero(); w * h];
        let mut g_xx = vec![T::zero(); w * h];
        let mut g_xy = vec![T::zero(); w * h];
        for p in 0..w * h {
            let (mx, my) = (m.mx[p], m.my[p]);
            let sxx = m.exx[p] - mx * mx;
            let syy = m.eyy[p] - my * my;
            let sxy = m.exy[p] - mx * my;
            let a1 = two * mx * my + c1;
            let a2 = two * sxy + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = sxx + syy + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                // Per-pixel partials, pre-divided by the window mass for the adjoint filter.
                let scale = m.inv_z[p] / count;
                g_mu[p] = scale * s * (two * my / a1 - two * mx / b1 - two * my / a2 + two * mx / b2);
                g_xx[p] = scale * s * (-T::one() / b2);
                g_xy[p] = scale * s * (two / a2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let fm = filter_plane(&g_mu, w, h, &kernel);
            let fxx = filter_plane(&g_xx, w, h, &kernel);
            let fxy = filter_plane(&g_xy, w, h, &kernel);
            for p in 0..w * h {
                g.data[p * ch + c] = fm[p] + two * xp[c][p] * fxx[p] + yp[c][p] * fxy[p];
            }
        }
    }
    Ok((total / count, grad))
}

/// `0.8 · L1 + 0.2 · (1 − SSIM)` and its gradient with respect to `render`.
pub fn rgb_loss<T: Real>(render: &Image<T>, gt: &Image<T>) -> Result<(T, Image<T>)> {
    render.same_shape(gt)?;
    let lw = T::lit(1.0 - DSSIM_WEIGHT);
    let sw = T::lit(DSSIM_WEIGHT);
    let inv = T::one() / T::lit(render.data.len().max(1) as f64);
    let mut l1 = T::zero();
    let mut grad = Image::zeros(render.width, render.height, render.channels);
    for ((g, &a), &b) in grad.data.iter_mut().zip(&render.data).zip(&gt.data) {
        let d = a - b;
        l1 += d.abs();
        *g = if d > T::zero() {
            lw * inv
        } else if d < T::zero() {
            -lw * inv
        } else {
            T::zero()
        };
    }
    let (s, sg) = ssim_with_grad(render, gt, true)?;
    let sg = sg.expect("gradient requested");
    for (g, &d) in grad.data.iter_mut().zip(&sg.data) {
        *g -= sw * d;
    }
    Ok((lw * l1 * inv + sw * (T::one() - s), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(w[i], w[10 - i]);
        }
    }

    #[test]
    fn filter_of_ones_is_window_mass() {
        let k: Vec<f64> = gaussian_window(5, 1.0);
        let out = filter_plane(&vec![1.0; 9 * 7], 9, 7, &k);
        assert!((out[3 * 9 + 4] - 1.0).abs() < 1e-15);
        assert!(out[0] < 1.0 && out[0] > 0.3);
    }
}
