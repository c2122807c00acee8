mod common;

use common::*;
use legaussians::image::Image;
use legaussians::losses::{
    gaussian_window, rgb_loss, semantic_ce_loss, smoothing_loss, ssim, uncertainty_reg, SSIM_SIGMA, SSIM_WINDOW,
};
use legaussians::quantizer::IndexMap;
use proptest::prelude::*;
use rand::Rng;

/// Direct 2-D SSIM: for every pixel, sum the full 11×11 product window over
/// in-image samples and divide by the in-image weight.
fn ssim_oracle(x: &Image<f64>, y: &Image<f64>) -> f64 {
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let r = (SSIM_WINDOW / 2) as isize;
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for c in 0..x.channels {
        for py in 0..x.height as isize {
            for px in 0..x.width as isize {
                let (mut z, mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qx, qy) = (px + dx, py + dy);
                        if qx < 0 || qy < 0 || qx >= x.width as isize || qy >= x.height as isize {
                            continue;
                        }
                        let wgt = g[(dx + r) as usize] * g[(dy + r) as usize];
                        let a = x.pixel(qx as usize, qy as usize)[c];
                        let b = y.pixel(qx as usize, qy as usize)[c];
                        z += wgt;
                        mx += wgt * a;
                        my += wgt * b;
                        xx += wgt * a * a;
                        yy += wgt * b * b;
                        xy += wgt * a * b;
                    }
                }
                let (mx, my, xx, yy, xy) = (mx / z, my / z, xx / z, yy / z, xy / z);
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (x.width * x.height * x.channels) as f64
}

#[test]
fn ssim_matches_direct_window_oracle() {
    for seed in 0..8 {
        let mut r = rng(seed);
        let (w, h) = (r.gen_range(1..20), r.gen_range(1..20));
        let x = random_image(&mut r, w, h, 3);
        let mut y = x.clone();
        for v in &mut y.data {
            *v += r.gen_range(-0.3..0.3);
        }
        let a = ssim(&x, &y).unwrap();
        let b = ssim_oracle(&x, &y);
        assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn constant_images_have_closed_form_ssim() {
    let c1 = 1e-4;
    for &(a, b) in &[(0.0, 0.5), (0.2, 0.2), (1.0, 0.3)] {
        let x = Image::filled(17, 9, 3, a);
        let y = Image::filled(17, 9, 3, b);
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got: f64 = ssim(&x, &y).unwrap();
        assert!((got - expect).abs() < 1e-12, "{a},{b}: {got} vs {expect}");
    }
}

#[test]
fn identical_images_have_zero_rgb_loss() {
    let mut r = rng(3);
    let x = random_image(&mut r, 12, 7, 3);
    let (l, g) = rgb_loss(&x, &x).unwrap();
    assert!(l.abs() < 1e-12);
    assert!(g.data.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn uniform_logits_give_log_n_scaled_by_confidence() {
    let n = 6;
    let logits = Image::filled(3, 2, n, 0.7f64);
    let u = Image::from_vec(3, 2, 1, vec![0.0, 0.5, 1.0, 0.25, 0.0, 0.75]).unwrap();
    let targets = IndexMap { width: 3, height: 2, indices: vec![0, 1, 2, 3, 4, 5] };
    let (l, _, du) = semantic_ce_loss(&logits, &targets, &u).unwrap();
    let mean_conf = u.data.iter().map(|v| 1.0 - v).sum::<f64>() / 6.0;
    assert!((l - (n as f64).ln() * mean_conf).abs() < 1e-12);
    for v in du.data {
        assert!((v + (n as f64).ln() / 6.0).abs() < 1e-12);
    }
}

#[test]
fn full_uncertainty_silences_the_classifier() {
    let mut r = rng(4);
    let logits = random_image(&mut r, 4, 4, 5);
    let u = Image::filled(4, 4, 1, 1.0);
    let targets = IndexMap { width: 4, height: 4, indices: vec![2; 16] };
    let (l, dl, du) = semantic_ce_loss(&logits, &targets, &u).unwrap();
    assert_eq!(l, 0.0);
    assert!(dl.data.iter().all(|&v| v == 0.0));
    assert!(du.data.iter().all(|&v| v < 0.0));
}

#[test]
fn out_of_range_target_is_rejected() {
    let logits = Image::<f64>::zeros(2, 2, 3);
    let u = Image::zeros(2, 2, 1);
    let targets = IndexMap { width: 2, height: 2, indices: vec![0, 1, 2, 3] };
    assert!(semantic_ce_loss(&logits, &targets, &u).is_err());
}

#[test]
fn uncertainty_reg_is_the_mean() {
    let u = Image::from_vec(2, 2, 1, vec![0.1, 0.2, 0.3, 0.6f64]).unwrap();
    let (l, g) = uncertainty_reg(&u);
    assert!((l - 0.3).abs() < 1e-15);
    assert!(g.data.iter().all(|&v| v == 0.25));
}

#[test]
fn smoothing_loss_uses_the_weight_floor() {
    let d = 2;
    let s_mlp = [3.0f64, 4.0, 0.0, 0.0];
    let s_g = [0.0f64; 4];
    let u = [0.01f64, 0.9];
    let (l, d_mlp, d_g) = smoothing_loss(&s_mlp, &s_g, &u, 0.2, d).unwrap();
    // Gaussian 0: distance 5, weight max(0.01, 0.2). Gaussian 1 coincides.
    assert!((l - (5.0 + 0.2 * 5.0) / 2.0).abs() < 1e-12);
    assert_eq!(&d_mlp[..2], &[0.3, 0.4]);
    assert!((d_g[0] + 0.2 * 0.3).abs() < 1e-12 && (d_g[1] + 0.2 * 0.4).abs() < 1e-12);
    assert!(d_mlp[2..].iter().chain(&d_g[2..]).all(|&v| v == 0.0));
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..20 {
        let e = check_ce_grads(seed);
        assert!(e < FD_TOL, "ce seed {seed}: {e}");
        let e = check_smoothing_loss_grads(seed);
        assert!(e < FD_TOL, "smoothing seed {seed}: {e}");
        let e = check_rgb_grads(seed);
        assert!(e < FD_TOL, "rgb seed {seed}: {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..10_000, w in 1usize..12, h in 1usize..12) {
        let mut r = rng(seed);
        let x = random_image(&mut r, w, h, 2);
        let y = random_image(&mut r, w, h, 2);
        let a = ssim(&x, &y).unwrap();
        let b = ssim(&y, &x).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a <= 1.0 + 1e-12 && a >= -1.0 - 1e-12);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }
}
