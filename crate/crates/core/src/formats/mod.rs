//! On-disk formats for feature maps, images, label maps, masks and heatmaps,
//! plus the PCA false-colour view of feature maps.

mod turbo;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::{HybridFeatureMap, Image, LabelMap};
use crate::quantizer::IndexMap;
use crate::query::{Mask, RelevancyMap};

pub use turbo::TURBO;

pub const FEATURE_MAGIC: &[u8; 8] = b"LEGFEAT\0";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 32;

fn format_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format { format, reason: reason.into() }
}

/// Feature-map bytes: a 32-byte header (magic, version, width, height,
/// d_clip, d_dino, zero pad) followed by row-major little-endian `f32` pixels.
pub fn encode_features(map: &HybridFeatureMap<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER + 4 * map.image.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, map.width() as u32, map.height() as u32, map.d_clip as u32, map.d_dino as u32, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for x in &map.image.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<HybridFeatureMap<f32>> {
    const F: &str = "feature map";
    if bytes.len() < FEATURE_HEADER {
        return Err(format_err(F, format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(format_err(F, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    if word(0) as u32 != FEATURE_VERSION {
        return Err(format_err(F, format!("unsupported version {}", word(0))));
    }
    let (w, h, dc, dd) = (word(1), word(2), word(3), word(4));
    let need = w * h * (dc + dd) * 4;
    let body = &bytes[FEATURE_HEADER..];
    if body.len() != need {
        return Err(format_err(F, format!("expected {need} data bytes, found {}", body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    HybridFeatureMap::new(dc, dd, Image::from_vec(w, h, dc + dd, data)?)
}

pub fn save_features(path: &Path, map: &HybridFeatureMap<f32>) -> Result<()> {
    std::fs::write(path, encode_features(map)).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<HybridFeatureMap<f32>> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| format_err("png", e.to_string()))?;
    writer.write_image_data(data).map_err(|e| format_err("png", e.to_string()))?;
    writer.finish().map_err(|e| format_err("png", e.to_string()))
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| format_err("png", e.to_string()))?;
    let mut data = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut data).map_err(|e| format_err("png", e.to_string()))?;
    data.truncate(info.buffer_size());
    Ok(Decoded { width: info.width as usize, height: info.height as usize, color: info.color_type, depth: info.bit_depth, data })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB; values are clamped to `[0, 1]`.
pub fn save_rgb_png(path: &Path, img: &Image<f32>) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::DimensionMismatch { what: "rgb png channels", expected: 3, found: img.channels });
    }
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    write_png(path, img.width, img.height, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

pub fn load_rgb_png(path: &Path) -> Result<Image<f32>> {
    let d = read_png(path)?;
    if d.color != png::ColorType::Rgb || d.depth != png::BitDepth::Eight {
        return Err(format_err("png", format!("{}: expected 8-bit RGB, found {:?} {:?}", path.display(), d.color, d.depth)));
    }
    Image::from_vec(d.width, d.height, 3, d.data.iter().map(|&b| f32::from(b) / 255.0).collect())
}

/// 16-bit greyscale, big-endian samples as PNG requires.
pub fn save_u16_png(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn load_u16_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let d = read_png(path)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::Sixteen {
        return Err(format_err("png", format!("{}: expected 16-bit greyscale", path.display())));
    }
    Ok((d.width, d.height, d.data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

pub fn save_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    save_u16_png(path, map.width, map.height, &map.labels)
}

pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let (width, height, labels) = load_u16_png(path)?;
    Ok(LabelMap { width, height, labels })
}

pub fn save_index_map(path: &Path, map: &IndexMap) -> Result<()> {
    save_u16_png(path, map.width, map.height, &map.indices)
}

pub fn load_index_map(path: &Path) -> Result<IndexMap> {
    let (width, height, indices) = load_u16_png(path)?;
    Ok(IndexMap { width, height, indices })
}

/// 1-bit greyscale mask.
pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let stride = mask.width.div_ceil(8);
    let mut bytes = vec![0u8; stride * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.bits[y * mask.width + x] {
                bytes[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    write_png(path, mask.width, mask.height, png::ColorType::Grayscale, png::BitDepth::One, &bytes)
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let d = read_png(path)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::One {
        return Err(format_err("png", format!("{}: expected a 1-bit mask", path.display())));
    }
    let stride = d.width.div_ceil(8);
    let bits = (0..d.width * d.height)
        .map(|i| {
            let (x, y) = (i % d.width, i / d.width);
            d.data[y * stride + x / 8] & (0x80 >> (x % 8)) != 0
        })
        .collect();
    Ok(Mask { width: d.width, height: d.height, bits })
}

/// Colour of a score in `[0, 1]` under the turbo table.
pub fn turbo(score: f32) -> [u8; 3] {
    let i = (score.clamp(0.0, 1.0) * 255.0).round() as usize;
    TURBO[i]
}

pub fn heatmap(map: &RelevancyMap) -> Image<f32> {
    let data = map.scores.iter().flat_map(|&s| turbo(s).map(|c| f32::from(c) / 255.0)).collect();
    Image::from_vec(map.width, map.height, 3, data).expect("three channels per score")
}

pub fn save_heatmap_png(path: &Path, map: &RelevancyMap) -> Result<()> {
    let bytes: Vec<u8> = map.scores.iter().flat_map(|&s| turbo(s)).collect();
    write_png(path, map.width, map.height, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

/// Projects every pixel onto the three leading principal components of the
/// image's features and rescales each component to `[0, 1]`.
pub fn pca_rgb(features: &Image<f32>) -> Image<f32> {
    let (p, d) = (features.pixel_count(), features.channels);
    let mut out = Image::zeros(features.width, features.height, 3);
    if p == 0 || d == 0 {
        return out;
    }
    let mean: Vec<f64> = (0..d).map(|k| features.data.iter().skip(k).step_by(d).map(|&v| f64::from(v)).sum::<f64>() / p as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for px in features.data.chunks_exact(d) {
        for a in 0..d {
            let da = f64::from(px[a]) - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (f64::from(px[b]) - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    for (c, &k) in order.iter().take(3).enumerate() {
        let axis = eig.eigenvectors.column(k);
        // Fix the sign so the largest-magnitude loading is positive.
        let pivot = (0..d).max_by(|&i, &j| axis[i].abs().total_cmp(&axis[j].abs())).unwrap_or(0);
        let sign = if axis[pivot] < 0.0 { -1.0 } else { 1.0 };
        let proj: Vec<f64> = features
            .data
            .chunks_exact(d)
            .map(|px| sign * (0..d).map(|i| (f64::from(px[i]) - mean[i]) * axis[i]).sum::<f64>())
            .collect();
        let (lo, hi) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = hi - lo;
        for (i, v) in proj.iter().enumerate() {
            out.data[i * 3 + c] = if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 };
        }
    }
    out
}

/// Writes UTF-8 text, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
