//! Quantizer fixtures: random hybrid features, codebooks, an exhaustive
//! assignment oracle and the codebook-loss gradient checks.

use super::*;
use legaussians::image::HybridFeatureMap;
use legaussians::quantizer::{cosine_loss, cosine_loss_grad, load_balance_grad, load_balance_loss, Codebook};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const DC: usize = 6;
pub const DD: usize = 3;

pub fn unit(r: &mut impl Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(r)).collect();
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / s).collect()
}

pub fn hybrid(r: &mut impl Rng) -> Vec<f64> {
    let mut v = unit(r, DC);
    v.extend(unit(r, DD));
    v
}

pub fn random_codebook(r: &mut impl Rng, n: usize, lambda: f64) -> Codebook<f64> {
    Codebook::new(DC, DD, lambda, (0..n).flat_map(|_| hybrid(r)).collect()).unwrap()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}


/// Worst relative error of the cosine-loss codebook gradient on one random batch.
pub fn check_cosine_grad(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..6);
    let lam = r.gen_range(0.0..1.0);
    let mut cb = random_codebook(&mut r, n, lam);
    // Off-unit entries exercise the norm terms of the gradient.
    cb.entries.iter_mut().for_each(|v| *v *= r.gen_range(0.5..2.0));
    let k = r.gen_range(1..12);
    let feats: Vec<f64> = (0..k).flat_map(|_| hybrid(&mut r)).collect();
    let asg: Vec<usize> = (0..k).map(|_| r.gen_range(0..n)).collect();
    let (_, g) = cosine_loss_grad(&feats, &cb, &asg).unwrap();
    let num = central_diff(&cb.entries, |e| {
        let c = Codebook { entries: e.to_vec(), ..cb.clone() };
        cosine_loss(&feats, &c, &asg).unwrap()
    });
    worst_rel_err(&g, &num)
}

/// Load-balancing gradient on random similarities against differences that
/// hold the argmax shares fixed (no row is near a tie at these scales).
pub fn check_load_balance_grad(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (k, n) = (r.gen_range(1..10), r.gen_range(1..8));
    let sims: Vec<f64> = (0..k * n).map(|_| r.gen_range(-1.5..1.5)).collect();
    let (_, g) = load_balance_grad(&sims, k, n);
    let num = central_diff(&sims, |s| load_balance_loss(s, k, n));
    worst_rel_err(&g, &num)
}

/// `clusters` tight groups of hybrid features on a `w × h` map.
pub fn clustered_map(r: &mut impl Rng, clusters: usize, w: usize, h: usize, spread: f64) -> (HybridFeatureMap<f32>, Vec<usize>) {
    let centers: Vec<Vec<f64>> = (0..clusters).map(|_| hybrid(r)).collect();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for _ in 0..w * h {
        let c = r.gen_range(0..clusters);
        labels.push(c);
        let mut f: Vec<f64> = centers[c].iter().map(|v| v + { let z: f64 = StandardNormal.sample(r); spread * z / (DC as f64).sqrt() }).collect();
        for (lo, hi) in [(0, DC), (DC, DC + DD)] {
            let s = f[lo..hi].iter().map(|x| x * x).sum::<f64>().sqrt();
            f[lo..hi].iter_mut().for_each(|x| *x /= s);
        }
        data.extend(f.iter().map(|&v| v as f32));
    }
    (HybridFeatureMap::new(DC, DD, Image::from_vec(w, h, DC + DD, data).unwrap()).unwrap(), labels)
}

pub fn oracle_similarity(f: &[f64], e: &[f64], lambda: f64) -> f64 {
    cos(&f[..DC], &e[..DC]) + lambda * cos(&f[DC..], &e[DC..])
}

pub fn oracle_assign(f: &[f64], cb: &Codebook<f64>) -> usize {
    let mut best = 0;
    for i in 1..cb.n() {
        if oracle_similarity(f, cb.entry(i), cb.lambda_dino) > oracle_similarity(f, cb.entry(best), cb.lambda_dino) {
            best = i;
        }
    }
    best
}
