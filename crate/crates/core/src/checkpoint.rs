//! Binary checkpoint container.
//!
//! Layout (little-endian): the 7-byte magic `LEG3D\0\0`, a `u32` version,
//! then named sections. Each section starts with a 16-byte zero-padded
//! ASCII name and a `u64` payload length. The byte layout of every payload
//! is described in `docs/FORMATS.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::heads::{Decoder, Dense, Mlp, SmoothingMlp};
use crate::quantizer::Codebook;
use crate::scene::GaussianCloud;
use crate::trainer::SceneModel;

pub const MAGIC: &[u8; 7] = b"LEG3D\0\0";
pub const VERSION: u32 = 1;
const NAME_LEN: usize = 16;

/// Free-form metadata stored as JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    /// Echo of the configuration that produced the checkpoint.
    pub config: serde_json::Value,
}

/// Trained scene plus the codebook it decodes into.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneCheckpoint {
    pub model: SceneModel,
    pub codebook: Codebook<f32>,
    pub meta: CheckpointMeta,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("array length fits in u32"));
    }
    fn section(&mut self, name: &str, payload: &[u8]) {
        let mut n = [0u8; NAME_LEN];
        n[..name.len()].copy_from_slice(name.as_bytes());
        self.0.extend_from_slice(&n);
        self.u64(payload.len() as u64);
        self.0.extend_from_slice(payload);
    }
}

struct Reader<'a> {
    section: &'a str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(section: &'a str, data: &'a [u8]) -> Self {
        Self { section, data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.data.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                section: self.section.to_string(),
                needed: n as u64,
                available: available as u64,
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u32()? as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("array length overflows"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn arrays<const K: usize>(&mut self, n: usize) -> Result<Vec<[f32; K]>, CheckpointError> {
        Ok(self.f32s(n * K)?.chunks_exact(K).map(|c| c.try_into().unwrap()).collect())
    }

    fn malformed(&self, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Malformed { section: self.section.to_string(), reason: reason.into() }
    }

    fn finish(&self) -> Result<(), CheckpointError> {
        if self.pos != self.data.len() {
            return Err(self.malformed(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

fn encode_gaussians(c: &GaussianCloud<f32>) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(c.len());
    w.len(c.sem_dim);
    w.f32s(c.positions.as_flattened());
    w.f32s(c.rotations.as_flattened());
    w.f32s(c.log_scales.as_flattened());
    w.f32s(&c.opacity_raw);
    w.f32s(c.colors.as_flattened());
    w.f32s(&c.semantics);
    w.f32s(&c.uncertainty_raw);
    for &l in &c.labels {
        w.u32(l);
    }
    w.0
}

fn decode_gaussians(r: &mut Reader<'_>) -> Result<GaussianCloud<f32>, CheckpointError> {
    let n = r.count()?;
    let d = r.count()?;
    let mut c = GaussianCloud::new(d);
    c.positions = r.arrays::<3>(n)?;
    c.rotations = r.arrays::<4>(n)?;
    c.log_scales = r.arrays::<3>(n)?;
    c.opacity_raw = r.f32s(n)?;
    c.colors = r.arrays::<3>(n)?;
    c.semantics = r.f32s(n * d)?;
    c.uncertainty_raw = r.f32s(n)?;
    c.labels = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
    Ok(c)
}

fn encode_codebook(cb: &Codebook<f32>) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(cb.n());
    w.len(cb.d_clip);
    w.len(cb.d_dino);
    w.f64(cb.lambda_dino);
    w.f32s(&cb.entries);
    w.0
}

fn decode_codebook(r: &mut Reader<'_>) -> Result<Codebook<f32>, CheckpointError> {
    let n = r.count()?;
    let dc = r.count()?;
    let dd = r.count()?;
    let lambda = r.f64()?;
    let entries = r.f32s(n * (dc + dd))?;
    Codebook::new(dc, dd, lambda, entries).map_err(|e| r.malformed(e.to_string()))
}

fn encode_mlp(w: &mut Writer, mlp: &Mlp<f32>) {
    w.len(mlp.layers.len());
    for l in &mlp.layers {
        w.len(l.inputs);
        w.len(l.outputs);
        w.f32s(&l.weight);
        w.f32s(&l.bias);
    }
}

fn decode_mlp(r: &mut Reader<'_>) -> Result<Mlp<f32>, CheckpointError> {
    let count = r.count()?;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let inputs = r.count()?;
        let outputs = r.count()?;
        let weight = r.f32s(inputs * outputs)?;
        let bias = r.f32s(outputs)?;
        layers.push(Dense { inputs, outputs, weight, bias });
    }
    let mlp = Mlp { layers };
    mlp.check_shapes().map_err(|e| r.malformed(e.to_string()))?;
    Ok(mlp)
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ck: &SceneCheckpoint) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.section("GAUSS", &encode_gaussians(&ck.model.cloud));
    w.section("CODEBOOK", &encode_codebook(&ck.codebook));
    let mut dec = Writer::default();
    encode_mlp(&mut dec, &ck.model.decoder.mlp);
    w.section("DECODER", &dec.0);
    let mut smo = Writer::default();
    smo.len(ck.model.smoother.frequencies);
    encode_mlp(&mut smo, &ck.model.smoother.mlp);
    w.section("SMOOTHMLP", &smo.0);
    let meta = serde_json::to_vec(&ck.meta).map_err(|e| Error::Format { format: "checkpoint meta", reason: e.to_string() })?;
    w.section("META", &meta);
    Ok(w.0)
}

#[derive(Default)]
struct Parts {
    cloud: Option<GaussianCloud<f32>>,
    codebook: Option<Codebook<f32>>,
    decoder: Option<Decoder<f32>>,
    smoother: Option<SmoothingMlp<f32>>,
    meta: Option<CheckpointMeta>,
}

fn decode_parts(bytes: &[u8]) -> Result<Parts> {
    let mut top = Reader::new("header", bytes);
    if top.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = top.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let mut parts = Parts::default();
    while top.pos < bytes.len() {
        top.section = "section header";
        let raw = top.take(NAME_LEN)?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| top.malformed("section name is not ASCII"))?
            .trim_end_matches('\0')
            .to_string();
        let len = top.u64()?;
        let available = (bytes.len() - top.pos) as u64;
        if len > available {
            return Err(CheckpointError::Truncated { section: name, needed: len, available }.into());
        }
        let payload = top.take(len as usize)?;
        let mut r = Reader::new(&name, payload);
        match name.as_str() {
            "GAUSS" => parts.cloud = Some(decode_gaussians(&mut r)?),
            "CODEBOOK" => parts.codebook = Some(decode_codebook(&mut r)?),
            "DECODER" => parts.decoder = Some(Decoder { mlp: decode_mlp(&mut r)? }),
            "SMOOTHMLP" => {
                let frequencies = r.count()?;
                parts.smoother = Some(SmoothingMlp { frequencies, mlp: decode_mlp(&mut r)? });
            }
            "META" => {
                parts.meta = Some(serde_json::from_slice::<CheckpointMeta>(payload).map_err(|e| r.malformed(e.to_string()))?);
                r.pos = payload.len();
            }
            // Unknown sections are skipped so newer writers stay readable.
            _ => r.pos = payload.len(),
        }
        r.finish()?;
    }
    Ok(parts)
}

/// Parses bytes produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<SceneCheckpoint> {
    let Parts { cloud, codebook, decoder, smoother, meta } = decode_parts(bytes)?;
    let cloud = cloud.ok_or(CheckpointError::MissingSection("GAUSS"))?;
    let codebook = codebook.ok_or(CheckpointError::MissingSection("CODEBOOK"))?;
    let decoder = decoder.ok_or(CheckpointError::MissingSection("DECODER"))?;
    let smoother = smoother.ok_or(CheckpointError::MissingSection("SMOOTHMLP"))?;
    let meta = meta.ok_or(CheckpointError::MissingSection("META"))?;
    if decoder.mlp.input_dim() != cloud.sem_dim || smoother.output_dim() != cloud.sem_dim {
        return Err(CheckpointError::Malformed {
            section: "DECODER".into(),
            reason: format!("head widths do not match the semantic dimension {}", cloud.sem_dim),
        }
        .into());
    }
    Ok(SceneCheckpoint { model: SceneModel { cloud, decoder, smoother }, codebook, meta })
}

pub fn save_checkpoint(path: &Path, ck: &SceneCheckpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SceneCheckpoint> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// A container holding only a `GAUSS` section, used for initial point clouds.
pub fn encode_cloud(cloud: &GaussianCloud<f32>) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.section("GAUSS", &encode_gaussians(cloud));
    w.0
}

/// Reads the `GAUSS` section of any container.
pub fn decode_cloud(bytes: &[u8]) -> Result<GaussianCloud<f32>> {
    Ok(decode_parts(bytes)?.cloud.ok_or(CheckpointError::MissingSection("GAUSS"))?)
}

pub fn save_cloud(path: &Path, cloud: &GaussianCloud<f32>) -> Result<()> {
    std::fs::write(path, encode_cloud(cloud)).map_err(|e| Error::io(path, e))
}

pub fn load_cloud(path: &Path) -> Result<GaussianCloud<f32>> {
    decode_cloud(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Container holding only a `CODEBOOK` section, written after quantization.
pub fn encode_codebook_file(codebook: &Codebook<f32>) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.section("CODEBOOK", &encode_codebook(codebook));
    w.0
}

/// Reads the `CODEBOOK` section of any container.
pub fn decode_codebook_file(bytes: &[u8]) -> Result<Codebook<f32>> {
    Ok(decode_parts(bytes)?.codebook.ok_or(CheckpointError::MissingSection("CODEBOOK"))?)
}

pub fn save_codebook(path: &Path, codebook: &Codebook<f32>) -> Result<()> {
    std::fs::write(path, encode_codebook_file(codebook)).map_err(|e| Error::io(path, e))
}

pub fn load_codebook(path: &Path) -> Result<Codebook<f32>> {
    decode_codebook_file(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
