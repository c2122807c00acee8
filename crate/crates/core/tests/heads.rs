mod common;

use common::*;
use legaussians::heads::{positional_encode, Decoder, Mlp, SmoothingMlp};
use legaussians::image::Image;
use rand::Rng;

/// Direct per-row dense-layer evaluation.
fn dense_oracle(mlp: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let last = mlp.layers.len() - 1;
    for (l, layer) in mlp.layers.iter().enumerate() {
        let mut next = vec![0.0; layer.outputs];
        for o in 0..layer.outputs {
            let mut acc = layer.bias[o];
            for i in 0..layer.inputs {
                acc += layer.weight[o * layer.inputs + i] * cur[i];
            }
            next[o] = if l == last { acc } else { acc.max(0.0) };
        }
        cur = next;
    }
    cur
}

#[test]
fn decoder_matches_dense_oracle() {
    let mut r = rng(1);
    let dec = Decoder::<f64>::new(8, 6, &mut r);
    let img = random_image(&mut r, 2, 2, 8);
    let logits = dec.forward(&img).unwrap();
    for y in 0..2 {
        for x in 0..2 {
            let want = dense_oracle(&dec.mlp, img.pixel(x, y));
            assert!(max_abs_diff(logits.pixel(x, y), &want) < 1e-12);
        }
    }
}

#[test]
fn decoder_is_pixel_permutation_equivariant() {
    let mut r = rng(2);
    let dec = Decoder::<f64>::new(8, 4, &mut r);
    let img = random_image(&mut r, 5, 3, 8);
    let mut swapped = img.clone();
    let (a, b) = (img.pixel(0, 0).to_vec(), img.pixel(4, 2).to_vec());
    swapped.pixel_mut(0, 0).copy_from_slice(&b);
    swapped.pixel_mut(4, 2).copy_from_slice(&a);
    let la = dec.forward(&img).unwrap();
    let lb = dec.forward(&swapped).unwrap();
    assert_eq!(la.pixel(0, 0), lb.pixel(4, 2));
    assert_eq!(la.pixel(4, 2), lb.pixel(0, 0));
    assert_eq!(la.pixel(2, 1), lb.pixel(2, 1));
}

#[test]
fn positional_encoding_matches_formula() {
    let mut r = rng(3);
    for _ in 0..20 {
        let p = [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)];
        let e = positional_encode(p, 2);
        assert_eq!(e.len(), 15);
        let pi = std::f64::consts::PI;
        let mut want = p.to_vec();
        for l in 0..2 {
            let f = 2f64.powi(l) * pi;
            want.extend(p.iter().map(|v| (f * v).sin()));
            want.extend(p.iter().map(|v| (f * v).cos()));
        }
        assert!(max_abs_diff(&e, &want) < 1e-15);
        assert!(e[3..].iter().all(|v| v.abs() <= 1.0));
    }
}

#[test]
fn smoothing_batch_equals_single_evaluation() {
    let mut r = rng(4);
    let sm = SmoothingMlp::<f64>::new(2, 8, &mut r);
    let pts: Vec<[f64; 3]> = (0..300).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let batch = sm.infer(&pts).unwrap();
    for (i, p) in pts.iter().enumerate() {
        let one = sm.infer(std::slice::from_ref(p)).unwrap();
        assert_eq!(&batch[i * 8..(i + 1) * 8], one.as_slice());
        let want = dense_oracle(&sm.mlp, &positional_encode(*p, 2));
        assert!(max_abs_diff(&one, &want) < 1e-12);
    }
}

#[test]
fn zero_upstream_gives_zero_head_gradients() {
    let mut r = rng(5);
    let dec = Decoder::<f64>::new(8, 5, &mut r);
    let img = random_image(&mut r, 3, 3, 8);
    let (_, cache) = dec.forward_cached(&img).unwrap();
    let (g, dx) = dec.backward(&cache, &Image::zeros(3, 3, 5)).unwrap();
    assert!(g.flatten().iter().all(|&v| v == 0.0));
    assert!(dx.data.iter().all(|&v| v == 0.0));
}

#[test]
fn head_gradients_match_finite_differences() {
    for seed in 0..10 {
        let e = check_decoder_grads(seed);
        assert!(e < FD_TOL, "decoder seed {seed}: {e}");
        let e = check_smoothing_grads(seed);
        assert!(e < FD_TOL, "smoothing seed {seed}: {e}");
    }
}

#[test]
fn full_size_decoder_gradient_spot_check() {
    let mut r = rng(6);
    let dec = Decoder::<f64>::new(8, 7, &mut r);
    let img = random_image(&mut r, 2, 1, 8);
    let up = random_image(&mut r, 2, 1, 7);
    let (_, cache) = dec.forward_cached(&img).unwrap();
    let (g, dx) = dec.backward(&cache, &up).unwrap();
    let loss = |d: &Decoder<f64>, im: &Image<f64>| -> f64 {
        d.forward(im).unwrap().data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
    };
    let num_x = central_diff(&img.data, |x| loss(&dec, &Image::from_vec(2, 1, 8, x.to_vec()).unwrap()));
    assert!(worst_rel_err(&dx.data, &num_x) < FD_TOL);
    // A sample of weights from every layer.
    let w = dec.mlp.flatten();
    let gw = g.flatten();
    for k in (0..w.len()).step_by(w.len() / 97) {
        let mut wp = w.clone();
        wp[k] += FD_STEP;
        let mut wm = w.clone();
        wm[k] -= FD_STEP;
        let mut dp = dec.clone();
        dp.mlp.set_flat(&wp);
        let mut dm = dec.clone();
        dm.mlp.set_flat(&wm);
        let fd = (loss(&dp, &img) - loss(&dm, &img)) / (2.0 * FD_STEP);
        assert!(rel_err(gw[k], fd, FD_FLOOR) < FD_TOL, "weight {k}");
    }
}

#[test]
fn relu_at_zero_uses_zero_subgradient() {
    // One hidden unit sits exactly at zero pre-activation.
    let mut mlp = Mlp::<f64>::zeros(&[2, 2, 1]);
    mlp.layers[0].weight = vec![1.0, -1.0, 0.5, 0.5];
    mlp.layers[0].bias = vec![0.0, 0.0];
    mlp.layers[1].weight = vec![2.0, 3.0];
    let x = [0.4, 0.4]; // unit 0: 0.4 − 0.4 = 0; unit 1: 0.4
    let (out, cache) = mlp.forward(&x, 1).unwrap();
    assert!((out[0] - 1.2).abs() < 1e-15);
    let (g, dx) = mlp.backward(&cache, &[1.0]).unwrap();
    // Oracle with the same convention: only unit 1 is active.
    assert_eq!(g.layers[0].weight, vec![0.0, 0.0, 3.0 * 0.4, 3.0 * 0.4]);
    assert_eq!(g.layers[0].bias, vec![0.0, 3.0]);
    assert_eq!(g.layers[1].weight, vec![0.0, 0.4]);
    assert_eq!(dx, vec![3.0 * 0.5, 3.0 * 0.5]);
}

#[test]
fn full_width_smoothing_gradient_spot_check() {
    let mut r = rng(7);
    let sm = SmoothingMlp::<f64>::new(1, 8, &mut r);
    let pts: Vec<[f64; 3]> = (0..3).map(|_| [0; 3].map(|_| r.gen_range(-1.0..1.0))).collect();
    let up: Vec<f64> = (0..pts.len() * 8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (_, cache) = sm.forward(&pts).unwrap();
    let (g, dp) = sm.backward(&cache, &up).unwrap();
    let loss = |sm: &SmoothingMlp<f64>, pts: &[[f64; 3]]| -> f64 {
        sm.infer(pts).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    let flat_p: Vec<f64> = pts.iter().flatten().copied().collect();
    let num_p = central_diff(&flat_p, |x| {
        let p: Vec<[f64; 3]> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        loss(&sm, &p)
    });
    let an_p: Vec<f64> = dp.iter().flatten().copied().collect();
    assert!(worst_rel_err(&an_p, &num_p) < FD_TOL);
    let w = sm.mlp.flatten();
    let gw = g.flatten();
    let picks: Vec<usize> = (0..w.len()).step_by(w.len() / 101).collect();
    let sub: Vec<f64> = picks.iter().map(|&k| w[k]).collect();
    let num = piecewise_linear_diff(&sub, |x| {
        let mut wp = w.clone();
        for (&k, &v) in picks.iter().zip(x) {
            wp[k] = v;
        }
        let mut s = sm.clone();
        s.mlp.set_flat(&wp);
        loss(&s, &pts)
    });
    let an: Vec<f64> = picks.iter().map(|&k| gw[k]).collect();
    assert!(worst_rel_err(&an, &num) < FD_TOL);
}
