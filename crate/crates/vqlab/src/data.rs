//! Deterministic synthetic datasets, Netpbm image IO, and the VQTF binary
//! feature interchange format.
//!
//! Synthetic images stand in for real training corpora: blobs, stripes, and
//! checkerboards with randomized colors, scales, and phases give the patch
//! distribution enough spread for k-means codebooks to matter. Every
//! generator is a pure function of its seed. Externally computed features
//! (for example CLIP patch embeddings) enter through VQTF files.

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clustering::{ClusterError, FeatureSet, FeatureSource};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed header: {0}")]
    HeaderParse(String),
    #[error("file is truncated")]
    Truncated,
    #[error("unsupported feature-file version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown feature source tag {0:?}")]
    BadTag(String),
    #[error("image size {size} is not divisible by patch size {patch}")]
    Divisibility { size: usize, patch: usize },
    #[error("invalid image: {0}")]
    BadImage(&'static str),
    #[error("invalid parameter: {0}")]
    BadParam(&'static str),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// H x W x C image, row-major channel-interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(DataError::BadImage("dimensions must be positive with 1 or 3 channels"));
        }
        if data.len() != height * width * channels {
            return Err(DataError::BadImage("buffer does not match dimensions"));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(DataError::BadImage("values outside [0, 1]"));
        }
        Ok(Self { height, width, channels, data })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// A named set of same-shaped images plus the seed that produced it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub name: String,
    pub seed: u64,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Synthetic image family.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticStyle {
    Blobs,
    Stripes,
    Checker,
    Mixed,
}

impl SyntheticStyle {
    pub fn tag(&self) -> &'static str {
        match self {
            SyntheticStyle::Blobs => "blobs",
            SyntheticStyle::Stripes => "stripes",
            SyntheticStyle::Checker => "checker",
            SyntheticStyle::Mixed => "mixed",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "blobs" => Some(SyntheticStyle::Blobs),
            "stripes" => Some(SyntheticStyle::Stripes),
            "checker" => Some(SyntheticStyle::Checker),
            "mixed" => Some(SyntheticStyle::Mixed),
            _ => None,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn rand_color(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f32> {
    (0..channels).map(|_| rng.gen_range(0.0f32..1.0)).collect()
}

fn gen_blobs(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Image {
    let bg = rand_color(rng, channels);
    let mut data = Vec::with_capacity(size * size * channels);
    for _ in 0..size * size {
        data.extend_from_slice(&bg);
    }
    let blobs = rng.gen_range(2..=5);
    for _ in 0..blobs {
        let cx = rng.gen_range(0.0..size as f32);
        let cy = rng.gen_range(0.0..size as f32);
        let r = rng.gen_range(2.0..size as f32 / 3.0);
        let col = rand_color(rng, channels);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                let a = (-d2 / (2.0 * r * r)).exp();
                let px = (y * size + x) * channels;
                for c in 0..channels {
                    let v = data[px + c] * (1.0 - a) + col[c] * a;
                    data[px + c] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Image { height: size, width: size, channels, data }
}

fn gen_stripes(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Image {
    let theta = rng.gen_range(0.0..std::f32::consts::PI);
    let cycles = rng.gen_range(1.5f32..6.0);
    let freq = 2.0 * std::f32::consts::PI * cycles / size as f32;
    let phase = rng.gen_range(0.0..2.0 * std::f32::consts::PI);
    let c0 = rand_color(rng, channels);
    let c1 = rand_color(rng, channels);
    let hard = rng.gen_bool(0.5);
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut data = Vec::with_capacity(size * size * channels);
    for y in 0..size {
        for x in 0..size {
            let t = 0.5 + 0.5 * (freq * (x as f32 * dx + y as f32 * dy) + phase).sin();
            let t = if hard { (t > 0.5) as u8 as f32 } else { t };
            for c in 0..channels {
                data.push((c0[c] + (c1[c] - c0[c]) * t).clamp(0.0, 1.0));
            }
        }
    }
    Image { height: size, width: size, channels, data }
}

fn gen_checker(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Image {
    let cell = *[2usize, 4, 8].choose(rng).unwrap();
    let ox = rng.gen_range(0..cell);
    let oy = rng.gen_range(0..cell);
    let c0 = rand_color(rng, channels);
    let c1 = rand_color(rng, channels);
    let mut data = Vec::with_capacity(size * size * channels);
    for y in 0..size {
        for x in 0..size {
            let parity = ((x + ox) / cell + (y + oy) / cell) % 2;
            let col = if parity == 0 { &c0 } else { &c1 };
            data.extend_from_slice(col);
        }
    }
    Image { height: size, width: size, channels, data }
}

/// Procedurally generate `count` images of one style (or a per-image style
/// draw for `Mixed`). Bit-identical for identical arguments.
pub fn gen_synthetic(
    style: SyntheticStyle,
    count: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<Dataset> {
    let weights = match style {
        SyntheticStyle::Blobs => [1.0, 0.0, 0.0],
        SyntheticStyle::Stripes => [0.0, 1.0, 0.0],
        SyntheticStyle::Checker => [0.0, 0.0, 1.0],
        SyntheticStyle::Mixed => [1.0, 1.0, 1.0],
    };
    gen_synthetic_mix(weights, count, size, channels, seed, style.tag())
}

/// Weighted style mix (blobs, stripes, checker). Distinct mixes with distinct
/// seeds stand in for distinct source datasets.
pub fn gen_synthetic_mix(
    weights: [f32; 3],
    count: usize,
    size: usize,
    channels: usize,
    seed: u64,
    name: &str,
) -> Result<Dataset> {
    if count == 0 {
        return Err(DataError::BadParam("count must be >= 1"));
    }
    if size == 0 || !(channels == 1 || channels == 3) {
        return Err(DataError::BadParam("size must be positive with 1 or 3 channels"));
    }
    let total: f32 = weights.iter().sum();
    if total <= 0.0 {
        return Err(DataError::BadParam("style weights must have positive mass"));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15)));
        let pick = rng.gen_range(0.0..total);
        let img = if pick < weights[0] {
            gen_blobs(&mut rng, size, channels)
        } else if pick < weights[0] + weights[1] {
            gen_stripes(&mut rng, size, channels)
        } else {
            gen_checker(&mut rng, size, channels)
        };
        images.push(img);
    }
    Ok(Dataset { images, name: name.to_string(), seed, split: "full".to_string() })
}

/// Manifest written next to generated artifacts for provenance.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    pub style: String,
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, json)?;
    Ok(())
}

// ---- Netpbm (binary P6 / P5) ----------------------------------------------

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // skip whitespace and '#' comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return Err(DataError::Truncated);
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Write a binary PPM (P6) for 3-channel images or PGM (P5) for 1-channel,
/// 8 bits per sample.
pub fn save_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    write!(w, "{}\n{} {}\n255\n", magic, img.width, img.height)?;
    let mut buf = Vec::with_capacity(img.data.len());
    for &v in &img.data {
        buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Read a binary PPM (P6) or PGM (P5). ASCII variants (P1-P3) and sample
/// depths above 8 bits are rejected with explicit errors.
pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let magic = read_token(&bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        "P1" | "P2" | "P3" => {
            return Err(DataError::UnsupportedFormat(format!(
                "{magic} is an ASCII Netpbm variant; only binary P5/P6 are supported"
            )))
        }
        other => {
            return Err(DataError::BadMagic { expected: "P6 or P5", found: other.to_string() })
        }
    };
    let width: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| DataError::HeaderParse("width is not an integer".to_string()))?;
    let height: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| DataError::HeaderParse("height is not an integer".to_string()))?;
    let maxval: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| DataError::HeaderParse("maxval is not an integer".to_string()))?;
    if maxval == 0 || maxval > 255 {
        return Err(DataError::UnsupportedFormat(format!("maxval {maxval}; only 8-bit samples supported")));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(DataError::HeaderParse("missing separator before pixel data".to_string()));
    }
    pos += 1;
    let expected = width * height * channels;
    if bytes.len() < pos + expected {
        return Err(DataError::Truncated);
    }
    let data: Vec<f32> = bytes[pos..pos + expected].iter().map(|&b| b as f32 / maxval as f32).collect();
    Image::new(height, width, channels, data)
}

// ---- VQTF feature files ----------------------------------------------------
//
// magic "VQTF", version u16, rows u64, cols u32, source-tag length u32 +
// UTF-8 bytes, then rows*cols little-endian f32 values.

const VQTF_MAGIC: &[u8; 4] = b"VQTF";
const VQTF_VERSION: u16 = 1;

pub fn save_feature_file(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(VQTF_MAGIC)?;
    w.write_all(&VQTF_VERSION.to_le_bytes())?;
    w.write_all(&(fs.rows as u64).to_le_bytes())?;
    w.write_all(&(fs.cols as u32).to_le_bytes())?;
    let tag = fs.source.tag().as_bytes();
    w.write_all(&(tag.len() as u32).to_le_bytes())?;
    w.write_all(tag)?;
    for v in &fs.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Load a VQTF feature file. The dataset id is taken from the file stem; the
/// format itself carries only the source tag.
pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let dataset_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);

    let trunc = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated
        } else {
            DataError::Io(e)
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != VQTF_MAGIC {
        return Err(DataError::BadMagic {
            expected: "VQTF",
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut u16b = [0u8; 2];
    r.read_exact(&mut u16b).map_err(trunc)?;
    let version = u16::from_le_bytes(u16b);
    if version != VQTF_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(trunc)?;
    let rows = u64::from_le_bytes(u64b);
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(trunc)?;
    let cols = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut u32b).map_err(trunc)?;
    let tag_len = u32::from_le_bytes(u32b) as usize;
    if tag_len > 4096 {
        return Err(DataError::HeaderParse("source tag is implausibly long".to_string()));
    }
    let mut tag = vec![0u8; tag_len];
    r.read_exact(&mut tag).map_err(trunc)?;
    let tag = String::from_utf8(tag).map_err(|_| DataError::HeaderParse("source tag is not UTF-8".to_string()))?;
    let source = FeatureSource::from_tag(&tag).ok_or(DataError::BadTag(tag))?;

    let count = (rows as usize)
        .checked_mul(cols)
        .ok_or(DataError::HeaderParse("rows*cols overflows".to_string()))?;
    let mut data = Vec::with_capacity(count);
    let mut f32b = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut f32b).map_err(trunc)?;
        data.push(f32::from_le_bytes(f32b));
    }
    Ok(FeatureSet::new(data, rows as usize, cols, source, dataset_id, 0)?)
}

// ---- feature extraction ----------------------------------------------------

/// Flatten each non-overlapping patch and subtract its scalar mean. Rows are
/// ordered image-major, then patch-row-major, so extraction commutes with
/// dataset concatenation.
pub fn extract_pixel_patch_features(ds: &Dataset, patch: usize) -> Result<FeatureSet> {
    let first = ds.images.first().ok_or(DataError::BadParam("dataset is empty"))?;
    let (size, channels) = (first.height, first.channels);
    if patch == 0 || size % patch != 0 {
        return Err(DataError::Divisibility { size, patch });
    }
    let per_side = size / patch;
    let dim = patch * patch * channels;
    let mut data = Vec::with_capacity(ds.len() * per_side * per_side * dim);
    let mut row = vec![0.0f32; dim];
    for img in &ds.images {
        for py in 0..per_side {
            for px in 0..per_side {
                let mut k = 0;
                for y in 0..patch {
                    for x in 0..patch {
                        let p = img.pixel(py * patch + y, px * patch + x);
                        row[k..k + channels].copy_from_slice(p);
                        k += channels;
                    }
                }
                let mean = (row.iter().map(|&v| v as f64).sum::<f64>() / dim as f64) as f32;
                data.extend(row.iter().map(|&v| v - mean));
            }
        }
    }
    FeatureSet::new(
        data,
        ds.len() * per_side * per_side,
        dim,
        FeatureSource::PixelPatch,
        ds.name.clone(),
        ds.seed,
    )
    .map_err(Into::into)
}

/// Fixed random-feature extractor: a seeded two-layer map over raw patches.
/// It plays the role of a pretrained desk-scale encoder; the weights never
/// train, so features are a pure function of (image, seed).
pub fn extract_tiny_encoder_features(
    ds: &Dataset,
    patch: usize,
    out_dim: usize,
    seed: u64,
) -> Result<FeatureSet> {
    let first = ds.images.first().ok_or(DataError::BadParam("dataset is empty"))?;
    let (size, channels) = (first.height, first.channels);
    if patch == 0 || size % patch != 0 {
        return Err(DataError::Divisibility { size, patch });
    }
    if out_dim == 0 {
        return Err(DataError::BadParam("out_dim must be >= 1"));
    }
    let in_dim = patch * patch * channels;
    let hidden = (2 * out_dim).max(16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b1 = (6.0 / in_dim as f32).sqrt();
    let w1: Vec<f32> = (0..in_dim * hidden).map(|_| rng.gen_range(-b1..b1)).collect();
    let b2 = (6.0 / hidden as f32).sqrt();
    let w2: Vec<f32> = (0..hidden * out_dim).map(|_| rng.gen_range(-b2..b2)).collect();

    let per_side = size / patch;
    let mut data = Vec::with_capacity(ds.len() * per_side * per_side * out_dim);
    let mut raw = vec![0.0f32; in_dim];
    let mut h = vec![0.0f32; hidden];
    for img in &ds.images {
        for py in 0..per_side {
            for px in 0..per_side {
                let mut k = 0;
                for y in 0..patch {
                    for x in 0..patch {
                        let p = img.pixel(py * patch + y, px * patch + x);
                        raw[k..k + channels].copy_from_slice(p);
                        k += channels;
                    }
                }
                for (j, hv) in h.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for (i, &x) in raw.iter().enumerate() {
                        acc += x as f64 * w1[i * hidden + j] as f64;
                    }
                    *hv = if acc > 0.0 { acc as f32 } else { 0.2 * acc as f32 };
                }
                for j in 0..out_dim {
                    let mut acc = 0.0f64;
                    for (i, &x) in h.iter().enumerate() {
                        acc += x as f64 * w2[i * out_dim + j] as f64;
                    }
                    data.push(acc as f32);
                }
            }
        }
    }
    FeatureSet::new(
        data,
        ds.len() * per_side * per_side,
        out_dim,
        FeatureSource::TinyEncoder,
        ds.name.clone(),
        seed,
    )
    .map_err(Into::into)
}
