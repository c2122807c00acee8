//! Discrete language feature space: codebook assignment, the cosine and
//! load-balancing objectives, and codebook fitting.
//!
//! Similarity between a hybrid feature `F` and a basis `f` is
//! `cos(F_clip, f_clip) + λ_dino · cos(F_dino, f_dino)`; every pixel is
//! assigned the smallest index attaining the maximum.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::HybridFeatureMap;
use crate::optim::{AdamConfig, AdamState};
use crate::real::{dot, norm, normalize_in_place, softmax_into, Real};

/// `N` feature bases stored row-major as `[clip | dino]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T = f32> {
    pub d_clip: usize,
    pub d_dino: usize,
    pub lambda_dino: f64,
    pub entries: Vec<T>,
}

impl<T: Real> Codebook<T> {
    pub fn new(d_clip: usize, d_dino: usize, lambda_dino: f64, entries: Vec<T>) -> Result<Self> {
        let d = d_clip + d_dino;
        if d_clip == 0 || d == 0 || entries.is_empty() || entries.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                what: "codebook entries",
                expected: d,
                found: entries.len(),
            });
        }
        if entries.len() / d > u16::MAX as usize {
            return Err(Error::Config(format!(
                "codebook size {} exceeds the index map limit {}",
                entries.len() / d,
                u16::MAX
            )));
        }
        if !(lambda_dino >= 0.0) {
            return Err(Error::Config("lambda_dino must be >= 0".into()));
        }
        Ok(Self {
            d_clip,
            d_dino,
            lambda_dino,
            entries,
        })
    }

    pub fn n(&self) -> usize {
        self.entries.len() / self.dim()
    }

    pub fn dim(&self) -> usize {
        self.d_clip + self.d_dino
    }

    pub fn entry(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.entries[i * d..(i + 1) * d]
    }

    /// Rescales every clip and dino part to unit length.
    pub fn normalize_parts(&mut self) {
        let (d, dc) = (self.dim(), self.d_clip);
        for row in self.entries.chunks_mut(d) {
            let (c, r) = row.split_at_mut(dc);
            normalize_in_place(c);
            normalize_in_place(r);
        }
    }

    pub fn cast<U: Real>(&self) -> Codebook<U> {
        Codebook {
            d_clip: self.d_clip,
            d_dino: self.d_dino,
            lambda_dino: self.lambda_dino,
            entries: self.entries.iter().map(|&v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// Per-pixel codebook indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    pub width: usize,
    pub height: usize,
    pub indices: Vec<u16>,
}

impl IndexMap {
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.indices[y * self.width + x]
    }
}

fn cosine<T: Real>(a: &[T], b: &[T], what: &'static str) -> Result<T> {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm(what));
    }
    Ok(dot(a, b) / (na * nb))
}

/// `cos⟨clip parts⟩ + λ_dino · cos⟨dino parts⟩`.
pub fn similarity<T: Real>(f: &[T], basis: &[T], d_clip: usize, lambda_dino: f64) -> Result<T> {
    if f.len() != basis.len() {
        return Err(Error::DimensionMismatch {
            what: "hybrid feature",
            expected: basis.len(),
            found: f.len(),
        });
    }
    let c = cosine(&f[..d_clip], &basis[..d_clip], "clip similarity")?;
    let d = cosine(&f[d_clip..], &basis[d_clip..], "dino similarity")?;
    Ok(c + T::lit(lambda_dino) * d)
}

/// Smallest index of maximum similarity.
pub fn assign<T: Real>(f: &[T], codebook: &Codebook<T>) -> Result<usize> {
    let mut best = 0;
    let mut best_s = T::neg_infinity();
    for i in 0..codebook.n() {
        let s = similarity(f, codebook.entry(i), codebook.d_clip, codebook.lambda_dino)?;
        if s > best_s {
            best = i;
            best_s = s;
        }
    }
    Ok(best)
}

fn check_dims<T: Real>(map: &HybridFeatureMap<T>, codebook: &Codebook<T>) -> Result<()> {
    if map.d_clip != codebook.d_clip || map.d_dino != codebook.d_dino {
        return Err(Error::DimensionMismatch {
            what: "feature map vs codebook width",
            expected: codebook.dim(),
            found: map.dim(),
        });
    }
    Ok(())
}

/// Assigns every pixel of `features` (parallel over rows).
pub fn quantize_map<T: Real>(features: &HybridFeatureMap<T>, codebook: &Codebook<T>) -> Result<IndexMap> {
    check_dims(features, codebook)?;
    let indices = (0..features.pixel_count())
        .into_par_iter()
        .map(|i| assign(features.feature(i), codebook).map(|m| m as u16))
        .collect::<Result<Vec<_>>>()?;
    Ok(IndexMap {
        width: features.width(),
        height: features.height(),
        indices,
    })
}

/// Mean of `(1 − cos⟨clip⟩) + λ_dino (1 − cos⟨dino⟩)` between each feature
/// (rows of `features`) and its assigned entry.
pub fn cosine_loss<T: Real>(features: &[T], codebook: &Codebook<T>, assignments: &[usize]) -> Result<T> {
    Ok(cosine_loss_grad(features, codebook, assignments)?.0)
}

/// Cosine loss and its gradient with respect to the codebook entries.
pub fn cosine_loss_grad<T: Real>(
    features: &[T],
    codebook: &Codebook<T>,
    assignments: &[usize],
) -> Result<(T, Vec<T>)> {
    let (d, dc) = (codebook.dim(), codebook.d_clip);
    if features.len() != assignments.len() * d {
        return Err(Error::DimensionMismatch {
            what: "cosine loss batch",
            expected: assignments.len() * d,
            found: features.len(),
        });
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= codebook.n()) {
        return Err(Error::Config(format!("assignment {bad} is outside the codebook")));
    }
    let k = assignments.len().max(1);
    let inv_k = T::one() / T::lit(k as f64);
    let lam = T::lit(codebook.lambda_dino);
    let mut grad = vec![T::zero(); codebook.entries.len()];
    let mut loss = T::zero();
    for (f, &a) in features.chunks(d).zip(assignments) {
        let e = codebook.entry(a);
        let g = &mut grad[a * d..(a + 1) * d];
        for (lo, hi, w) in [(0, dc, T::one()), (dc, d, lam)] {
            let (fp, ep) = (&f[lo..hi], &e[lo..hi]);
            let c = cosine(fp, ep, "cosine loss")?;
            loss += w * (T::one() - c);
            // d cos / d e = f / (|f||e|) − cos · e / |e|²
            let (nf, ne) = (norm(fp), norm(ep));
            for j in 0..hi - lo {
                g[lo + j] -= inv_k * w * (fp[j] / (nf * ne) - c * ep[j] / (ne * ne));
            }
        }
    }
    Ok((loss * inv_k, grad))
}

/// `Σ_i r_i p_i` over a `k × n` similarity matrix, where `r` is the share of
/// rows whose argmax is `i` and `p` the mean row softmax.
pub fn load_balance_loss<T: Real>(sims: &[T], k: usize, n: usize) -> T {
    load_balance_grad(sims, k, n).0
}

/// Load-balancing loss and its gradient with respect to the similarities
/// (`r` held constant).
pub fn load_balance_grad<T: Real>(sims: &[T], k: usize, n: usize) -> (T, Vec<T>) {
    assert_eq!(sims.len(), k * n, "similarity matrix shape");
    let mut probs = vec![T::zero(); k * n];
    let mut r = vec![T::zero(); n];
    let inv_k = T::one() / T::lit(k.max(1) as f64);
    for (row, out) in sims.chunks(n).zip(probs.chunks_mut(n)) {
        softmax_into(row, out);
        r[crate::real::argmax(row)] += inv_k;
    }
    let mut loss = T::zero();
    for j in 0..n {
        let p: T = probs.iter().skip(j).step_by(n).copied().sum::<T>() * inv_k;
        loss += r[j] * p;
    }
    let mut grad = vec![T::zero(); k * n];
    for (prow, grow) in probs.chunks(n).zip(grad.chunks_mut(n)) {
        let rp: T = dot(&r, prow);
        for j in 0..n {
            grow[j] = inv_k * prow[j] * (r[j] - rp);
        }
    }
    (loss, grad)
}

/// Value and entry gradient of `λ_cos·L_cos + λ_lb·L_lb` on one batch,
/// assigning each row to its best entry under the current codebook.
#[derive(Clone, Debug)]
pub struct BatchObjective<T> {
    pub total: T,
    pub cosine: T,
    pub load_balance: T,
    pub grad: Vec<T>,
    pub assignments: Vec<usize>,
}

fn normalized_parts<T: Real>(rows: &[T], d: usize, dc: usize, what: &'static str) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let k = rows.len() / d;
    let (mut clip, mut dino, mut norms) = (Vec::with_capacity(k * dc), Vec::with_capacity(k * (d - dc)), Vec::with_capacity(2 * k));
    for row in rows.chunks(d) {
        for (part, out) in [(&row[..dc], &mut clip), (&row[dc..], &mut dino)] {
            let n = norm(part);
            if n == T::zero() {
                return Err(Error::ZeroNorm(what));
            }
            out.extend(part.iter().map(|&v| v / n));
            norms.push(n);
        }
    }
    Ok((clip, dino, norms))
}

pub fn batch_objective<T: Real>(
    features: &[T],
    codebook: &Codebook<T>,
    lambda_cos: f64,
    lambda_lb: f64,
) -> Result<BatchObjective<T>> {
    let (d, dc, n) = (codebook.dim(), codebook.d_clip, codebook.n());
    let dd = d - dc;
    if features.len() % d != 0 || features.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "quantizer batch",
            expected: d,
            found: features.len(),
        });
    }
    let k = features.len() / d;
    let (fc, fd, _) = normalized_parts(features, d, dc, "feature batch")?;
    let (ec, ed, en) = normalized_parts(&codebook.entries, d, dc, "codebook entry")?;
    let mut sc = vec![T::zero(); k * n];
    let mut sd = vec![T::zero(); k * n];
    T::gemm(k, dc, n, &fc, dc as isize, 1, &ec, 1, dc as isize, false, &mut sc, n as isize, 1);
    T::gemm(k, dd, n, &fd, dd as isize, 1, &ed, 1, dd as isize, false, &mut sd, n as isize, 1);
    let lam = T::lit(codebook.lambda_dino);
    let sims: Vec<T> = sc.iter().zip(&sd).map(|(&a, &b)| a + lam * b).collect();
    let assignments: Vec<usize> = sims.chunks(n).map(crate::real::argmax).collect();
    let inv_k = T::one() / T::lit(k as f64);
    let mut cos_loss = T::zero();
    for (row, &a) in assignments.iter().enumerate() {
        cos_loss += (T::one() - sc[row * n + a]) + lam * (T::one() - sd[row * n + a]);
    }
    cos_loss *= inv_k;
    let (lb, g_sim) = load_balance_grad(&sims, k, n);
    let (wc, wl) = (T::lit(lambda_cos), T::lit(lambda_lb));
    // dL/dS for the clip part; the dino part is the same scaled by λ_dino.
    let mut g = vec![T::zero(); k * n];
    for (i, v) in g.iter_mut().enumerate() {
        *v = wl * g_sim[i];
    }
    for (row, &a) in assignments.iter().enumerate() {
        g[row * n + a] -= wc * inv_k;
    }
    let mut gc = vec![T::zero(); n * dc];
    let mut gd = vec![T::zero(); n * dd];
    T::gemm(n, k, dc, &g, 1, n as isize, &fc, dc as isize, 1, false, &mut gc, dc as isize, 1);
    T::gemm(n, k, dd, &g, 1, n as isize, &fd, dd as isize, 1, false, &mut gd, dd as isize, 1);
    let mut grad = vec![T::zero(); n * d];
    for j in 0..n {
        for (part, gp, ep, w, lo, width) in [
            (0, &gc, &ec, T::one(), 0, dc),
            (1, &gd, &ed, lam, dc, dd),
        ] {
            let gj = &gp[j * width..(j + 1) * width];
            let ej = &ep[j * width..(j + 1) * width];
            let proj = dot(gj, ej);
            let inv_norm = T::one() / en[2 * j + part];
            for t in 0..width {
                grad[j * d + lo + t] = w * (gj[t] - ej[t] * proj) * inv_norm;
            }
        }
    }
    Ok(BatchObjective {
        total: wc * cos_loss + wl * lb,
        cosine: cos_loss,
        load_balance: lb,
        grad,
        assignments,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub codebook_size: usize,
    pub lambda_cos: f64,
    pub lambda_lb: f64,
    pub lambda_dino: f64,
    pub epochs: usize,
    pub batch_pixels: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            codebook_size: 32,
            lambda_cos: 1.0,
            lambda_lb: 0.5,
            lambda_dino: 0.5,
            epochs: 10,
            batch_pixels: 4096,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.codebook_size == 0 {
            return bad("codebook_size must be positive");
        }
        if !(self.lambda_cos >= 0.0 && self.lambda_lb >= 0.0 && self.lambda_dino >= 0.0) {
            return bad("quantizer loss weights must be >= 0");
        }
        if self.epochs == 0 || self.batch_pixels == 0 {
            return bad("epochs and batch_pixels must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total_loss: f64,
    pub cosine_loss: f64,
    pub load_balance_loss: f64,
    /// Pixel count per codebook entry after the epoch.
    pub utilization: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct QuantizerFit<T = f32> {
    pub codebook: Codebook<T>,
    pub index_maps: Vec<IndexMap>,
    pub history: Vec<EpochStats>,
}

/// Shannon entropy (nats) of a utilization histogram.
pub fn utilization_entropy(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

fn histogram(indices: impl Iterator<Item = usize>, n: usize) -> Vec<usize> {
    let mut h = vec![0; n];
    for i in indices {
        h[i] += 1;
    }
    h
}

/// Seeds the codebook with `n` sampled pixels, preferring distinct feature values.
fn initial_entries<T: Real>(all: &[T], d: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let pixels = all.len() / d;
    let mut order: Vec<usize> = (0..pixels).collect();
    order.shuffle(rng);
    let key = |i: usize| -> Vec<u64> { all[i * d..(i + 1) * d].iter().map(|v| v.to_f64_lossy().to_bits()).collect() };
    let mut seen = HashSet::new();
    let mut chosen = Vec::with_capacity(n);
    let mut spare = Vec::new();
    for &i in &order {
        if chosen.len() == n {
            break;
        }
        if seen.insert(key(i)) {
            chosen.push(i);
        } else if spare.len() < n {
            spare.push(i);
        }
    }
    chosen.extend(spare.into_iter().take(n - chosen.len()));
    chosen.iter().flat_map(|&i| all[i * d..(i + 1) * d].iter().copied()).collect()
}

/// Fits an `N`-entry codebook to every pixel of `maps` and returns the
/// frozen per-map index maps.
pub fn fit_codebook<T: Real>(maps: &[HybridFeatureMap<T>], config: &QuantizerConfig) -> Result<QuantizerFit<T>> {
    fit_codebook_with(maps, config, |_| {})
}

/// [`fit_codebook`] with a callback invoked after every epoch.
pub fn fit_codebook_with<T: Real>(
    maps: &[HybridFeatureMap<T>],
    config: &QuantizerConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<QuantizerFit<T>> {
    config.validate()?;
    let first = maps.first().ok_or(Error::NoFeatures)?;
    let (dc, dd) = (first.d_clip, first.d_dino);
    let d = dc + dd;
    for m in maps {
        if m.d_clip != dc || m.d_dino != dd {
            return Err(Error::DimensionMismatch {
                what: "feature map width",
                expected: d,
                found: m.dim(),
            });
        }
    }
    let pixels: usize = maps.iter().map(|m| m.pixel_count()).sum();
    let n = config.codebook_size;
    if n > pixels {
        return Err(Error::CodebookTooLarge { n, pixels });
    }
    let all: Vec<T> = maps.iter().flat_map(|m| m.image.data.iter().copied()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut codebook = Codebook::new(dc, dd, config.lambda_dino, initial_entries(&all, d, n, &mut rng))?;
    codebook.normalize_parts();
    let adam_cfg = AdamConfig::with_lr(config.learning_rate);
    let mut adam = AdamState::new(codebook.entries.len());
    let mut order: Vec<usize> = (0..pixels).collect();
    let mut batch = Vec::with_capacity(config.batch_pixels * d);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut cos, mut lb) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_pixels) {
            batch.clear();
            for &i in chunk {
                batch.extend_from_slice(&all[i * d..(i + 1) * d]);
            }
            let obj = batch_objective(&batch, &codebook, config.lambda_cos, config.lambda_lb)?;
            let w = chunk.len() as f64 / pixels as f64;
            tot += w * obj.total.to_f64_lossy();
            cos += w * obj.cosine.to_f64_lossy();
            lb += w * obj.load_balance.to_f64_lossy();
            adam.step(&adam_cfg, &mut codebook.entries, &obj.grad, "codebook")?;
            codebook.normalize_parts();
        }
        let assigned = (0..pixels)
            .into_par_iter()
            .map(|i| assign(&all[i * d..(i + 1) * d], &codebook))
            .collect::<Result<Vec<_>>>()?;
        let stats = EpochStats {
            epoch,
            total_loss: tot,
            cosine_loss: cos,
            load_balance_loss: lb,
            utilization: histogram(assigned.into_iter(), n),
        };
        on_epoch(&stats);
        history.push(stats);
    }
    let index_maps = maps.iter().map(|m| quantize_map(m, &codebook)).collect::<Result<Vec<_>>>()?;
    Ok(QuantizerFit {
        codebook,
        index_maps,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_of_uniform_histogram_is_log_n() {
        assert!((utilization_entropy(&[5, 5, 5, 5]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(utilization_entropy(&[9, 0, 0]), 0.0);
    }

    #[test]
    fn duplicate_pixels_are_skipped_at_init() {
        let all = vec![1.0f64, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = initial_entries(&all, 2, 2, &mut rng);
        assert_ne!(e[..2], e[2..]);
    }
}
