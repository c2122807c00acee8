//! Finite-difference gradient checks shared by the unit suites and the
//! acceptance run. Each returns the worst relative error for one seed.

use super::*;
use legaussians::heads::{Mlp, SmoothingMlp};
use legaussians::raster::{rasterize, rasterize_backward, rasterize_with_state, ChannelMask, RasterSettings};
use legaussians::scene::SEMANTIC_DIM;
use rand::Rng;

/// Worst relative error and the fraction of nonzero analytic entries.
pub fn check_raster_grads(seed: u64) -> (f64, f64) {
    let mut r = rng(500 + seed);
    let cloud = random_cloud(&mut r, 6, 0.8);
    let cam = test_camera(8, 8, &mut r);
    let bg = [r.gen(), r.gen(), r.gen()];
    let settings = RasterSettings { tile_size: 4, background: bg };
    let up = random_upstream(&mut r, 8, 8, SEMANTIC_DIM);
    let (_, state) = rasterize_with_state(&cloud, &cam, &settings).unwrap();
    let analytic = rasterize_backward(&state, &cloud, &up, ChannelMask::ALL).unwrap().flatten();
    let x = flatten_cloud(&cloud);
    let numeric = central_diff(&x, |x| {
        let c = unflatten_cloud(&cloud, x);
        weighted_sum(&rasterize(&c, &cam, &settings).unwrap(), &up)
    });
    let live = analytic.iter().filter(|v| v.abs() > 1e-6).count() as f64 / analytic.len() as f64;
    (worst_rel_err(&analytic, &numeric), live)
}

/// Central differences for a function that is piecewise linear in each
/// coordinate. A wide step keeps rounding noise out of the 128-wide hidden
/// layers; whenever the two one-sided slopes disagree a ReLU kink lies inside
/// the stencil and the step shrinks until it no longer does.
pub fn piecewise_linear_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let f0 = f(x);
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            let mut h = 1e-3;
            loop {
                xp[i] = orig + h;
                let fp = f(&xp);
                xp[i] = orig - h;
                let fm = f(&xp);
                xp[i] = orig;
                let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
                if (right - left).abs() <= 1e-9 * (1.0 + right.abs()) || h < 1e-7 {
                    return (fp - fm) / (2.0 * h);
                }
                h *= 0.1;
            }
        })
        .collect()
}

/// Finite-difference check of every weight and input of a small smoothing MLP.
pub fn check_smoothing_grads(seed: u64) -> f64 {
    let mut r = rng(seed);
    let freqs = r.gen_range(0..=2);
    // Narrow hidden layers keep the sweep fast; the full-width network is
    // spot-checked separately.
    let mut sm = SmoothingMlp::<f64> {
        frequencies: freqs,
        mlp: Mlp::he_uniform(&[3 + 6 * freqs, 16, 16, 16, 8], &mut r),
    };
    for l in &mut sm.mlp.layers {
        for b in &mut l.bias {
            *b = r.gen_range(-0.2..0.2);
        }
    }
    let pts: Vec<[f64; 3]> = (0..4).map(|_| [0; 3].map(|_| r.gen_range(-1.0..1.0))).collect();
    let up: Vec<f64> = (0..pts.len() * 8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (_, cache) = sm.forward(&pts).unwrap();
    let (g, dp) = sm.backward(&cache, &up).unwrap();
    let loss = |sm: &SmoothingMlp<f64>, pts: &[[f64; 3]]| -> f64 {
        sm.infer(pts).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    let w = sm.mlp.flatten();
    let num_w = piecewise_linear_diff(&w, |x| {
        let mut s = sm.clone();
        s.mlp.set_flat(x);
        loss(&s, &pts)
    });
    let flat_p: Vec<f64> = pts.iter().flatten().copied().collect();
    let num_p = central_diff(&flat_p, |x| {
        let p: Vec<[f64; 3]> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        loss(&sm, &p)
    });
    let an_p: Vec<f64> = dp.iter().flatten().copied().collect();
    worst_rel_err(&g.flatten(), &num_w).max(worst_rel_err(&an_p, &num_p))
}

pub fn check_decoder_grads(seed: u64) -> f64 {
    let mut r = rng(seed);
    // Narrow copy of the decoder topology keeps the parameter sweep fast.
    let mut mlp = Mlp::<f64>::he_uniform(&[8, 12, 10, 5], &mut r);
    for l in &mut mlp.layers {
        for b in &mut l.bias {
            *b = r.gen_range(-0.2..0.2);
        }
    }
    let rows = 3;
    let x: Vec<f64> = (0..rows * 8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let up: Vec<f64> = (0..rows * 5).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (_, cache) = mlp.forward(&x, rows).unwrap();
    let (g, dx) = mlp.backward(&cache, &up).unwrap();
    let loss = |m: &Mlp<f64>, x: &[f64]| -> f64 {
        m.infer(x, rows).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    let num_w = central_diff(&mlp.flatten(), |w| {
        let mut m = mlp.clone();
        m.set_flat(w);
        loss(&m, &x)
    });
    let num_x = central_diff(&x, |x| loss(&mlp, x));
    worst_rel_err(&g.flatten(), &num_w).max(worst_rel_err(&dx, &num_x))
}


/// Cross-entropy gradients with respect to logits and the uncertainty map.
pub fn check_ce_grads(seed: u64) -> f64 {
    use legaussians::losses::semantic_ce_loss;
    use legaussians::quantizer::IndexMap;
    let mut r = rng(7000 + seed);
    let (w, h) = (r.gen_range(1..5), r.gen_range(1..5));
    let n = r.gen_range(2..7);
    let logits = Image::from_vec(w, h, n, (0..w * h * n).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap();
    let u = Image::from_vec(w, h, 1, (0..w * h).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
    let targets = IndexMap { width: w, height: h, indices: (0..w * h).map(|_| r.gen_range(0..n as u16)).collect() };
    let (_, dl, du) = semantic_ce_loss(&logits, &targets, &u).unwrap();
    let num_l = central_diff(&logits.data, |x| {
        let l = Image::from_vec(w, h, n, x.to_vec()).unwrap();
        semantic_ce_loss(&l, &targets, &u).unwrap().0
    });
    let num_u = central_diff(&u.data, |x| {
        let uu = Image::from_vec(w, h, 1, x.to_vec()).unwrap();
        semantic_ce_loss(&logits, &targets, &uu).unwrap().0
    });
    worst_rel_err(&dl.data, &num_l).max(worst_rel_err(&du.data, &num_u))
}

/// The MLP-side gradient must equal the derivative of the first term alone,
/// the Gaussian-side gradient that of the second term alone.
pub fn check_smoothing_loss_grads(seed: u64) -> f64 {
    use legaussians::losses::{smoothing_loss, smoothing_terms};
    let mut r = rng(8000 + seed);
    let (g, d) = (r.gen_range(1..6), SEMANTIC_DIM);
    let w_s = r.gen_range(0.05..0.5);
    let s_mlp: Vec<f64> = (0..g * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let s_g: Vec<f64> = (0..g * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let u: Vec<f64> = (0..g).map(|_| r.gen_range(0.0..1.0)).collect();
    let (_, d_mlp, d_g) = smoothing_loss(&s_mlp, &s_g, &u, w_s, d).unwrap();
    let num_mlp = central_diff(&s_mlp, |x| smoothing_terms(x, &s_g, &u, w_s, d).0);
    let num_g = central_diff(&s_g, |x| smoothing_terms(&s_mlp, x, &u, w_s, d).1);
    worst_rel_err(&d_mlp, &num_mlp).max(worst_rel_err(&d_g, &num_g))
}

/// RGB loss gradient on small images where most pixels touch the border.
pub fn check_rgb_grads(seed: u64) -> f64 {
    use legaussians::losses::rgb_loss;
    let mut r = rng(9000 + seed);
    let (w, h) = (r.gen_range(3..15), r.gen_range(3..15));
    let gt = random_image(&mut r, w, h, 3);
    // Keep every residual clear of the L1 kink.
    let data = gt
        .data
        .iter()
        .map(|&g| {
            let d: f64 = r.gen_range(0.01..0.4);
            if r.gen() { g + d } else { g - d }
        })
        .collect();
    let render = Image::from_vec(w, h, 3, data).unwrap();
    let (_, grad) = rgb_loss(&render, &gt).unwrap();
    let num = central_diff(&render.data, |x| {
        rgb_loss(&Image::from_vec(w, h, 3, x.to_vec()).unwrap(), &gt).unwrap().0
    });
    worst_rel_err(&grad.data, &num)
}

/// Gradient of the mean-uncertainty regularizer.
pub fn check_uncertainty_reg_grads(seed: u64) -> f64 {
    use legaussians::losses::uncertainty_reg;
    let mut r = rng(9500 + seed);
    let (w, h) = (r.gen_range(1..9), r.gen_range(1..9));
    let u = Image::from_vec(w, h, 1, (0..w * h).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
    let (_, grad) = uncertainty_reg(&u);
    let num = central_diff(&u.data, |x| uncertainty_reg(&Image::from_vec(w, h, 1, x.to_vec()).unwrap()).0);
    worst_rel_err(&grad.data, &num)
}
