//! Open-vocabulary queries against rendered language feature maps.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::Decoder;
use crate::image::{HybridFeatureMap, Image};
use crate::quantizer::{Codebook, IndexMap};
use crate::raster::{rasterize, RasterSettings};
use crate::real::{argmax, dot, norm, softmax_into, Real};
use crate::scene::{Camera, GaussianCloud};

const UNIT_TOLERANCE: f64 = 1e-4;

/// Per-pixel softmax distributions over the codebook.
pub fn selection_probabilities(logits: &Image<f32>) -> Image<f32> {
    let n = logits.channels;
    let mut out = Image::zeros(logits.width, logits.height, n);
    out.data
        .par_chunks_mut(n.max(1))
        .zip(logits.data.par_chunks(n.max(1)))
        .for_each(|(o, l)| softmax_into(l, o));
    out
}

/// Most probable codebook entry per pixel.
pub fn decode_index_map(logits: &Image<f32>) -> IndexMap {
    let n = logits.channels.max(1);
    IndexMap {
        width: logits.width,
        height: logits.height,
        indices: logits.data.chunks(n).map(|l| argmax(l) as u16).collect(),
    }
}

/// `softmax(logits) · S`: each pixel becomes a convex combination of codebook entries.
pub fn features_from_logits(logits: &Image<f32>, codebook: &Codebook<f32>) -> Result<HybridFeatureMap<f32>> {
    if logits.channels != codebook.n() {
        return Err(Error::CodebookMismatch {
            context: "decoder output vs codebook".into(),
            expected: codebook.n(),
            found: logits.channels,
        });
    }
    let probs = selection_probabilities(logits);
    let (p, n, d) = (logits.pixel_count(), codebook.n(), codebook.dim());
    let mut data = vec![0.0f32; p * d];
    f32::gemm(p, n, d, &probs.data, n as isize, 1, &codebook.entries, d as isize, 1, false, &mut data, d as isize, 1);
    HybridFeatureMap::new(codebook.d_clip, codebook.d_dino, Image::from_vec(logits.width, logits.height, d, data)?)
}

/// Renders the language feature map of `camera`.
pub fn render_feature_map(
    cloud: &GaussianCloud<f32>,
    decoder: &Decoder<f32>,
    codebook: &Codebook<f32>,
    camera: &Camera,
    settings: &RasterSettings,
) -> Result<HybridFeatureMap<f32>> {
    if decoder.classes() != codebook.n() {
        return Err(Error::CodebookMismatch {
            context: "decoder output vs codebook".into(),
            expected: codebook.n(),
            found: decoder.classes(),
        });
    }
    let out = rasterize(cloud, camera, settings)?;
    features_from_logits(&decoder.forward(&out.semantic)?, codebook)
}

/// A query embedding with its canonical negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub name: String,
    pub embedding: Vec<f32>,
    pub canonicals: Vec<Vec<f32>>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

impl QuerySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("query '{}': {m}", self.name)));
        if self.canonicals.is_empty() {
            return bad("needs at least one canonical negative".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        let d = self.embedding.len();
        for (what, v) in std::iter::once(("embedding", &self.embedding)).chain(self.canonicals.iter().map(|c| ("canonical", c))) {
            if v.len() != d {
                return bad(format!("{what} has {} entries, expected {d}", v.len()));
            }
            let n = f64::from(norm(v));
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return bad(format!("{what} is not unit length (norm {n:.6})"));
            }
        }
        Ok(())
    }
}

/// A set of queries as stored on disk.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryFile {
    #[serde(rename = "query")]
    pub queries: Vec<QuerySpec>,
}

impl QueryFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for q in &f.queries {
            q.validate()?;
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-pixel query scores in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevancyMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f32>,
}

/// Pairwise-softmax relevancy, minimized over the canonicals. Only the
/// clip slice of each pixel takes part, after unit normalization; a pixel
/// whose clip slice is zero scores 0.
pub fn relevancy(features: &HybridFeatureMap<f32>, query: &QuerySpec) -> Result<RelevancyMap> {
    query.validate()?;
    let dc = features.d_clip;
    if query.embedding.len() != dc {
        return Err(Error::DimensionMismatch {
            what: "query embedding vs feature clip slice",
            expected: dc,
            found: query.embedding.len(),
        });
    }
    let scores = (0..features.pixel_count())
        .into_par_iter()
        .map(|i| pixel_relevancy(&features.feature(i)[..dc], &query.embedding, &query.canonicals))
        .collect();
    Ok(RelevancyMap { width: features.width(), height: features.height(), scores })
}

fn pixel_relevancy(f: &[f32], q: &[f32], canonicals: &[Vec<f32>]) -> f32 {
    let n = f64::from(norm(f));
    if n == 0.0 {
        return 0.0;
    }
    let fq = f64::from(dot(f, q)) / n;
    canonicals
        .iter()
        .map(|c| {
            let fc = f64::from(dot(f, c)) / n;
            1.0 / (1.0 + (fc - fq).exp())
        })
        .fold(1.0, f64::min) as f32
}

/// Binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `scores > τ`.
pub fn segment(map: &RelevancyMap, threshold: f64) -> Mask {
    Mask {
        width: map.width,
        height: map.height,
        bits: map.scores.iter().map(|&s| f64::from(s) > threshold).collect(),
    }
}

/// Default negatives for a query on a synthetic scene: the background
/// embedding and the normalized mean of every other object's embedding.
pub fn default_canonicals(object_clips: &[Vec<f32>], background_clip: &[f32], query: usize) -> Vec<Vec<f32>> {
    let mut out = vec![unit(background_clip.to_vec())];
    let others: Vec<&Vec<f32>> = object_clips.iter().enumerate().filter(|&(i, _)| i != query).map(|(_, c)| c).collect();
    if !others.is_empty() {
        let d = background_clip.len();
        let mean: Vec<f32> = (0..d).map(|k| others.iter().map(|c| c[k]).sum::<f32>()).collect();
        if norm(&mean) > 0.0 {
            out.push(unit(mean));
        }
    }
    out
}

fn unit(mut v: Vec<f32>) -> Vec<f32> {
    let n = norm(&v);
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}
