//! Local features: keypoints with 128-d unit descriptors.

mod sift;

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image_io::RasterImage;

pub use sift::{SiftExtractor, SiftParams};

pub const DESCRIPTOR_LEN: usize = 128;

pub type Descriptor = [f32; DESCRIPTOR_LEN];

/// Position, scale and orientation of a local feature in image pixels.
///
/// Orientation is measured like `atan2(dy, dx)` in image coordinates
/// (y pointing down) and lies in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub scale: f32,
    pub orientation: f32,
}

/// Keypoints of one image with their parallel descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub image_id: String,
    keypoints: Vec<Keypoint>,
    descriptors: Vec<Descriptor>,
}

const NORM_TOLERANCE: f64 = 1e-5;

impl FeatureSet {
    pub fn new(image_id: impl Into<String>, keypoints: Vec<Keypoint>, descriptors: Vec<Descriptor>) -> Result<Self> {
        let image_id = image_id.into();
        if keypoints.len() != descriptors.len() {
            return Err(Error::Data(format!(
                "{image_id}: {} keypoints but {} descriptors",
                keypoints.len(),
                descriptors.len()
            )));
        }
        for (i, d) in descriptors.iter().enumerate() {
            let norm = l2_norm(d);
            if (norm - 1.0).abs() > NORM_TOLERANCE || d.iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(Error::Data(format!(
                    "{image_id}: descriptor {i} is not a non-negative unit vector (norm {norm})"
                )));
            }
        }
        for (i, k) in keypoints.iter().enumerate() {
            if k.scale.is_nan() || k.scale <= 0.0 || !k.x.is_finite() || !k.y.is_finite() || !k.orientation.is_finite()
            {
                return Err(Error::Data(format!("{image_id}: keypoint {i} is invalid")));
            }
        }
        Ok(FeatureSet {
            image_id,
            keypoints,
            descriptors,
        })
    }

    pub fn empty(image_id: impl Into<String>) -> Self {
        FeatureSet {
            image_id: image_id.into(),
            keypoints: Vec::new(),
            descriptors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    pub fn descriptors(&self) -> &[Descriptor] {
        &self.descriptors
    }

    pub fn with_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        let id = self.image_id.as_bytes();
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id)?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        for k in &self.keypoints {
            for v in [k.x, k.y, k.scale, k.orientation] {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        for d in &self.descriptors {
            for v in d {
                w.write_f32::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    /// Reads one record; `Ok(None)` at a clean end of stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut magic = [0u8; 5];
        match read_exact_or_eof(r, &mut magic)? {
            0 => return Ok(None),
            5 => {}
            n => return Err(truncated("feature record magic", 5, n)),
        }
        if &magic != FEATURE_MAGIC {
            return Err(Error::MalformedHeader {
                context: "feature record".into(),
                reason: "bad magic, expected GCFT1".into(),
            });
        }
        let io = |e: std::io::Error| Error::Data(format!("feature record: {e}"));
        let id_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(io)?;
        let id = String::from_utf8(id).map_err(|_| Error::Data("feature id is not UTF-8".into()))?;
        let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut keypoints = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let mut v = [0f32; 4];
            r.read_f32_into::<LittleEndian>(&mut v).map_err(io)?;
            keypoints.push(Keypoint {
                x: v[0],
                y: v[1],
                scale: v[2],
                orientation: v[3],
            });
        }
        let mut descriptors = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let mut d = [0f32; DESCRIPTOR_LEN];
            r.read_f32_into::<LittleEndian>(&mut d).map_err(io)?;
            descriptors.push(d);
        }
        FeatureSet::new(id, keypoints, descriptors).map(Some)
    }
}

const FEATURE_MAGIC: &[u8; 5] = b"GCFT1";

fn truncated(context: &str, expected: usize, found: usize) -> Error {
    Error::Truncated {
        context: context.into(),
        expected,
        found,
    }
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Data(format!("feature record: {e}"))),
        }
    }
    Ok(filled)
}

/// Writes a feature dump (concatenated GCFT1 records).
pub fn write_feature_file(path: &std::path::Path, sets: &[FeatureSet]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in sets {
        s.write_to(&mut w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &std::path::Path) -> Result<Vec<FeatureSet>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = &bytes[..];
    let mut out = Vec::new();
    while let Some(set) = FeatureSet::read_from(&mut cursor)? {
        out.push(set);
    }
    Ok(out)
}

pub fn l2_norm(d: &[f32]) -> f64 {
    d.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

/// Anything that turns pixels into a [`FeatureSet`].
pub trait FeatureExtractor: Sync {
    fn extract(&self, image_id: &str, img: &RasterImage) -> Result<FeatureSet>;
}

/// Extracts features with the reference SIFT-like extractor.
pub fn extract_features(img: &RasterImage, params: &SiftParams) -> Result<FeatureSet> {
    SiftExtractor::new(params.clone()).extract("", img)
}

/// Normalizes to unit length, clips at 0.2 and renormalizes, as SIFT does.
/// Returns `None` for an all-zero input.
pub fn finalize_descriptor(raw: &[f64; DESCRIPTOR_LEN]) -> Option<Descriptor> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_nan() || norm <= 0.0 {
        return None;
    }
    let clipped: Vec<f64> = raw.iter().map(|v| (v / norm).clamp(0.0, 0.2)).collect();
    let norm = clipped.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = [0f32; DESCRIPTOR_LEN];
    for (o, v) in out.iter_mut().zip(&clipped) {
        *o = (v / norm) as f32;
    }
    Some(out)
}

/// Image extent and scale range used by [`synthetic_features`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticLayout {
    pub width: f32,
    pub height: f32,
    pub min_scale: f32,
    pub max_scale: f32,
}

impl Default for SyntheticLayout {
    fn default() -> Self {
        SyntheticLayout {
            width: 640.0,
            height: 480.0,
            min_scale: 1.5,
            max_scale: 12.0,
        }
    }
}

/// A random SIFT-like descriptor: sparse, non-negative, clipped and unit norm.
pub fn random_descriptor<R: Rng>(rng: &mut R) -> Descriptor {
    loop {
        let mut raw = [0f64; DESCRIPTOR_LEN];
        for v in raw.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v = g.max(0.0).powi(2);
        }
        if let Some(d) = finalize_descriptor(&raw) {
            return d;
        }
    }
}

pub fn random_keypoint<R: Rng>(rng: &mut R, layout: &SyntheticLayout) -> Keypoint {
    let log_lo = layout.min_scale.ln();
    let log_hi = layout.max_scale.ln();
    Keypoint {
        x: rng.random::<f32>() * layout.width,
        y: rng.random::<f32>() * layout.height,
        scale: (log_lo + rng.random::<f32>() * (log_hi - log_lo)).exp(),
        orientation: (rng.random::<f32>() * std::f32::consts::TAU) % std::f32::consts::TAU,
    }
}

/// Deterministic pseudo-random features: same seed, same output.
pub fn synthetic_features(seed: u64, n: usize, layout: &SyntheticLayout) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keypoints = Vec::with_capacity(n);
    let mut descriptors = Vec::with_capacity(n);
    for _ in 0..n {
        keypoints.push(random_keypoint(&mut rng, layout));
        descriptors.push(random_descriptor(&mut rng));
    }
    FeatureSet {
        image_id: format!("synthetic-{seed}"),
        keypoints,
        descriptors,
    }
}
