//! The per-pixel semantic decoder and the coordinate smoothing MLP.
//!
//! Both are plain ReLU multilayer perceptrons evaluated on row batches; the
//! decoder's 1×1 convolutions are exactly per-pixel dense layers.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::real::Real;

/// Hidden widths of the semantic decoder.
pub const DECODER_HIDDEN: [usize; 2] = [128, 256];

/// Hidden widths of the smoothing MLP.
pub const SMOOTHING_HIDDEN: [usize; 3] = [128, 128, 128];

/// Positional-encoding frequency count used by the smoothing MLP.
pub const SMOOTHING_PE_FREQUENCIES: usize = 0;

/// Rows processed per work item; fixed so reductions are thread-count independent.
const CHUNK_ROWS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T = f32> {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    /// He-uniform weights, zero biases.
    pub fn he_uniform(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| T::lit(rng.gen_range(-bound..bound)))
                .collect(),
            bias: vec![T::zero(); outputs],
        }
    }

    fn forward_rows(&self, x: &[T], rows: usize, out: &mut [T]) {
        let (i, o) = (self.inputs as isize, self.outputs as isize);
        T::gemm(rows, self.inputs, self.outputs, x, i, 1, &self.weight, 1, i, false, out, o, 1);
        for row in out.chunks_mut(self.outputs) {
            for (v, &b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
    }
}

/// Dense stack with ReLU after every layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = f32> {
    pub layers: Vec<Dense<T>>,
}

/// Activations kept by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    rows: usize,
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<T>>,
}

impl<T> MlpCache<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads<T = f32> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> MlpGrads<T> {
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }
}

impl<T: Real> Mlp<T> {
    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn he_uniform(sizes: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            layers: sizes
                .windows(2)
                .map(|w| Dense::he_uniform(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Layer sizes, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn check_shapes(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::DimensionMismatch {
                    what: "mlp layer chain",
                    expected: pair[0].outputs,
                    found: pair[1].inputs,
                });
            }
        }
        for l in &self.layers {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::DimensionMismatch {
                    what: "mlp layer parameters",
                    expected: l.inputs * l.outputs,
                    found: l.weight.len(),
                });
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in the order used by [`MlpGrads::flatten`].
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[T]) {
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = it.next().expect("parameter vector too short");
            }
        }
    }

    fn check_input(&self, input: &[T], rows: usize) -> Result<()> {
        self.check_shapes()?;
        if input.len() != rows * self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "mlp input",
                expected: rows * self.input_dim(),
                found: input.len(),
            });
        }
        Ok(())
    }

    fn forward_chunk(&self, x: &[T], rows: usize, keep: bool) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = vec![T::zero(); rows * layer.outputs];
            layer.forward_rows(&cur, rows, &mut out);
            if l != last {
                for v in out.iter_mut() {
                    *v = v.max(T::zero());
                }
            }
            let prev = std::mem::replace(&mut cur, out);
            if keep {
                acts.push(prev);
            }
        }
        acts.push(cur);
        acts
    }

    /// Evaluates `rows` inputs without keeping activations.
    pub fn infer(&self, input: &[T], rows: usize) -> Result<Vec<T>> {
        self.check_input(input, rows)?;
        let din = self.input_dim();
        let parts: Vec<Vec<T>> = input
            .par_chunks(CHUNK_ROWS * din.max(1))
            .map(|x| {
                let r = x.len() / din;
                self.forward_chunk(x, r, false).pop().unwrap()
            })
            .collect();
        Ok(parts.concat())
    }

    pub fn forward(&self, input: &[T], rows: usize) -> Result<(Vec<T>, MlpCache<T>)> {
        self.check_input(input, rows)?;
        let din = self.input_dim();
        let parts: Vec<Vec<Vec<T>>> = input
            .par_chunks(CHUNK_ROWS * din.max(1))
            .map(|x| self.forward_chunk(x, x.len() / din, true))
            .collect();
        let mut acts: Vec<Vec<T>> = vec![Vec::new(); self.layers.len() + 1];
        for part in parts {
            for (dst, src) in acts.iter_mut().zip(part) {
                dst.extend(src);
            }
        }
        Ok((acts[self.layers.len()].clone(), MlpCache { rows, acts }))
    }

    /// Exact reverse-mode gradients; ReLU uses subgradient 0 at 0.
    pub fn backward(&self, cache: &MlpCache<T>, upstream: &[T]) -> Result<(MlpGrads<T>, Vec<T>)> {
        let rows = cache.rows;
        if upstream.len() != rows * self.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "mlp upstream gradient",
                expected: rows * self.output_dim(),
                found: upstream.len(),
            });
        }
        let n_chunks = rows.div_ceil(CHUNK_ROWS);
        let parts: Vec<(MlpGrads<T>, Vec<T>)> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let r0 = c * CHUNK_ROWS;
                let r1 = (r0 + CHUNK_ROWS).min(rows);
                self.backward_chunk(cache, upstream, r0, r1)
            })
            .collect();
        let mut grads = MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        };
        let mut dx = Vec::with_capacity(rows * self.input_dim());
        for (g, part_dx) in parts {
            for (dst, src) in grads.layers.iter_mut().zip(g.layers) {
                for (a, b) in dst.weight.iter_mut().zip(src.weight) {
                    *a += b;
                }
                for (a, b) in dst.bias.iter_mut().zip(src.bias) {
                    *a += b;
                }
            }
            dx.extend(part_dx);
        }
        Ok((grads, dx))
    }

    fn backward_chunk(&self, cache: &MlpCache<T>, upstream: &[T], r0: usize, r1: usize) -> (MlpGrads<T>, Vec<T>) {
        let rows = r1 - r0;
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream[r0 * self.output_dim()..r1 * self.output_dim()].to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let (i, o) = (layer.inputs, layer.outputs);
            if l != last {
                let post = &cache.acts[l + 1][r0 * o..r1 * o];
                for (dv, &a) in delta.iter_mut().zip(post) {
                    if a <= T::zero() {
                        *dv = T::zero();
                    }
                }
            }
            let x = &cache.acts[l][r0 * i..r1 * i];
            let mut g = Dense::zeros(i, o);
            // dW = δᵀ·X
            T::gemm(o, rows, i, &delta, 1, o as isize, x, i as isize, 1, false, &mut g.weight, i as isize, 1);
            for row in delta.chunks(o) {
                for (b, &dv) in g.bias.iter_mut().zip(row) {
                    *b += dv;
                }
            }
            // δ_prev = δ·W
            let mut prev = vec![T::zero(); rows * i];
            T::gemm(rows, o, i, &delta, o as isize, 1, &layer.weight, i as isize, 1, false, &mut prev, i as isize, 1);
            grads.push(g);
            delta = prev;
        }
        grads.reverse();
        (MlpGrads { layers: grads }, delta)
    }
}

/// `[p, sin(2⁰πp), cos(2⁰πp), …, sin(2^{L−1}πp), cos(2^{L−1}πp)]`.
pub fn positional_encode<T: Real>(p: [T; 3], frequencies: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(3 + 6 * frequencies);
    out.extend_from_slice(&p);
    let pi = T::lit(std::f64::consts::PI);
    for l in 0..frequencies {
        let f = T::lit((1u64 << l) as f64) * pi;
        out.extend(p.iter().map(|&v| (f * v).sin()));
        out.extend(p.iter().map(|&v| (f * v).cos()));
    }
    out
}

/// Pulls a gradient on the encoding back to the raw position.
pub fn positional_encode_backward<T: Real>(p: [T; 3], frequencies: usize, upstream: &[T]) -> [T; 3] {
    let mut g = [upstream[0], upstream[1], upstream[2]];
    let pi = T::lit(std::f64::consts::PI);
    for l in 0..frequencies {
        let f = T::lit((1u64 << l) as f64) * pi;
        let base = 3 + 6 * l;
        for k in 0..3 {
            g[k] += upstream[base + k] * f * (f * p[k]).cos();
            g[k] -= upstream[base + 3 + k] * f * (f * p[k]).sin();
        }
    }
    g
}

/// Maps rendered compact features (`d_s` channels) to codebook logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T = f32> {
    pub mlp: Mlp<T>,
}

impl<T: Real> Decoder<T> {
    pub fn new(sem_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::he_uniform(&[sem_dim, DECODER_HIDDEN[0], DECODER_HIDDEN[1], classes], rng),
        }
    }

    pub fn zeros(sem_dim: usize, classes: usize) -> Self {
        Self {
            mlp: Mlp::zeros(&[sem_dim, DECODER_HIDDEN[0], DECODER_HIDDEN[1], classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.mlp.output_dim()
    }

    fn check(&self, features: &Image<T>) -> Result<()> {
        if features.channels != self.mlp.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "decoder input channels",
                expected: self.mlp.input_dim(),
                found: features.channels,
            });
        }
        Ok(())
    }

    /// Per-pixel logits (`H×W×N`); softmax is left to callers.
    pub fn forward(&self, features: &Image<T>) -> Result<Image<T>> {
        self.check(features)?;
        let logits = self.mlp.infer(&features.data, features.pixel_count())?;
        Image::from_vec(features.width, features.height, self.classes(), logits)
    }

    pub fn forward_cached(&self, features: &Image<T>) -> Result<(Image<T>, MlpCache<T>)> {
        self.check(features)?;
        let (logits, cache) = self.mlp.forward(&features.data, features.pixel_count())?;
        Ok((
            Image::from_vec(features.width, features.height, self.classes(), logits)?,
            cache,
        ))
    }

    /// Weight gradients and the gradient with respect to the input feature map.
    pub fn backward(&self, cache: &MlpCache<T>, upstream: &Image<T>) -> Result<(MlpGrads<T>, Image<T>)> {
        let (g, dx) = self.mlp.backward(cache, &upstream.data)?;
        Ok((g, Image::from_vec(upstream.width, upstream.height, self.mlp.input_dim(), dx)?))
    }
}

/// Smooth feature field `s_MLP = MLP(PE(p))` over Gaussian positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingMlp<T = f32> {
    pub frequencies: usize,
    pub mlp: Mlp<T>,
}

/// Encoded inputs and MLP activations from [`SmoothingMlp::forward`].
#[derive(Clone, Debug)]
pub struct SmoothingCache<T> {
    positions: Vec<[T; 3]>,
    mlp: MlpCache<T>,
}

impl<T: Real> SmoothingMlp<T> {
    fn sizes(frequencies: usize, sem_dim: usize) -> Vec<usize> {
        let mut s = vec![3 + 6 * frequencies];
        s.extend(SMOOTHING_HIDDEN);
        s.push(sem_dim);
        s
    }

    pub fn new(frequencies: usize, sem_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            frequencies,
            mlp: Mlp::he_uniform(&Self::sizes(frequencies, sem_dim), rng),
        }
    }

    pub fn zeros(frequencies: usize, sem_dim: usize) -> Self {
        Self {
            frequencies,
            mlp: Mlp::zeros(&Self::sizes(frequencies, sem_dim)),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    fn encode_all(&self, positions: &[[T; 3]]) -> Result<Vec<T>> {
        if self.mlp.input_dim() != 3 + 6 * self.frequencies {
            return Err(Error::DimensionMismatch {
                what: "smoothing mlp input",
                expected: 3 + 6 * self.frequencies,
                found: self.mlp.input_dim(),
            });
        }
        Ok(positions
            .iter()
            .flat_map(|&p| positional_encode(p, self.frequencies))
            .collect())
    }

    /// Row-major `len × d_s` smoothed features.
    pub fn infer(&self, positions: &[[T; 3]]) -> Result<Vec<T>> {
        let x = self.encode_all(positions)?;
        self.mlp.infer(&x, positions.len())
    }

    pub fn forward(&self, positions: &[[T; 3]]) -> Result<(Vec<T>, SmoothingCache<T>)> {
        let x = self.encode_all(positions)?;
        let (out, cache) = self.mlp.forward(&x, positions.len())?;
        Ok((
            out,
            SmoothingCache {
                positions: positions.to_vec(),
                mlp: cache,
            },
        ))
    }

    /// Weight gradients and per-position input gradients.
    pub fn backward(&self, cache: &SmoothingCache<T>, upstream: &[T]) -> Result<(MlpGrads<T>, Vec<[T; 3]>)> {
        let (g, dx) = self.mlp.backward(&cache.mlp, upstream)?;
        let din = self.mlp.input_dim();
        let dp = cache
            .positions
            .iter()
            .zip(dx.chunks(din))
            .map(|(&p, up)| positional_encode_backward(p, self.frequencies, up))
            .collect();
        Ok((g, dp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoding_without_frequencies_is_identity() {
        let p = [0.3f64, -1.2, 4.0];
        assert_eq!(positional_encode(p, 0), p.to_vec());
    }

    #[test]
    fn encoding_of_origin() {
        let e = positional_encode([0.0f64; 3], 1);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_decoder_gives_uniform_softmax() {
        let dec = Decoder::<f64>::zeros(8, 5);
        let img = Image::filled(3, 2, 8, 0.7);
        let logits = dec.forward(&img).unwrap();
        assert_eq!(logits.channels, 5);
        assert!(logits.data.iter().all(|&v| v == 0.0));
        let mut p = [0.0; 5];
        crate::real::softmax_into(logits.pixel(0, 0), &mut p);
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn decoder_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = Decoder::<f32>::new(8, 32, &mut rng);
        assert_eq!(dec.mlp.sizes(), vec![8, 128, 256, 32]);
        let sm = SmoothingMlp::<f32>::new(0, 8, &mut rng);
        assert_eq!(sm.mlp.sizes(), vec![3, 128, 128, 128, 8]);
    }

    #[test]
    fn decoder_rejects_wrong_channel_count() {
        let dec = Decoder::<f64>::zeros(8, 4);
        assert!(dec.forward(&Image::zeros(2, 2, 7)).is_err());
    }

    #[test]
    fn zero_smoothing_mlp_outputs_zero() {
        let sm = SmoothingMlp::<f64>::zeros(0, 8);
        let out = sm.infer(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 0.5]]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }
}
