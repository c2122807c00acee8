//! Plain interleaved image buffers.

use crate::error::{Error, Result};
use crate::real::Real;

/// Row-major, channel-interleaved image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T = f32> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, T::zero())
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                what: "image buffer",
                expected: width * height * channels,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Channel `c` as its own single-channel plane.
    pub fn channel(&self, c: usize) -> Vec<T> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn same_shape(&self, other: &Image<T>) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.channels != other.channels {
            return Err(Error::DimensionMismatch {
                what: "image shape",
                expected: self.width * self.height * self.channels,
                found: other.width * other.height * other.channels,
            });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64_lossy()).unwrap())
                .collect(),
        }
    }
}

/// Per-pixel object labels; `LabelMap::BACKGROUND` marks empty pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub const BACKGROUND: u16 = u16::MAX;

    pub fn background(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![Self::BACKGROUND; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Pixels whose `(2r+1)²` neighbourhood (clipped to the image) carries a single label.
    pub fn interior_mask(&self, radius: usize) -> Vec<bool> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let l = self.get(x, y);
                let y0 = y.saturating_sub(radius);
                let y1 = (y + radius).min(h - 1);
                let x0 = x.saturating_sub(radius);
                let x1 = (x + radius).min(w - 1);
                out[y * w + x] = (y0..=y1).all(|yy| (x0..=x1).all(|xx| self.get(xx, yy) == l));
            }
        }
        out
    }
}

/// Per-pixel hybrid features: a CLIP-like slice followed by a DINO-like slice.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridFeatureMap<T = f32> {
    pub d_clip: usize,
    pub d_dino: usize,
    /// `d_clip + d_dino` channels per pixel.
    pub image: Image<T>,
}

impl<T: Real> HybridFeatureMap<T> {
    pub fn new(d_clip: usize, d_dino: usize, image: Image<T>) -> Result<Self> {
        if image.channels != d_clip + d_dino {
            return Err(Error::DimensionMismatch {
                what: "hybrid feature channels",
                expected: d_clip + d_dino,
                found: image.channels,
            });
        }
        Ok(Self { d_clip, d_dino, image })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn dim(&self) -> usize {
        self.d_clip + self.d_dino
    }

    pub fn pixel_count(&self) -> usize {
        self.image.pixel_count()
    }

    /// Feature of pixel index `i` (row-major).
    pub fn feature(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.image.data[i * d..(i + 1) * d]
    }
}
