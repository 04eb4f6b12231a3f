//! Codebook construction, storage, and projection.
//!
//! Covers the three initialization strategies (random values, random feature
//! selection, k-means centers), the frozen-vs-trainable flag, the linear
//! projector that maps a frozen codebook into the quantization space, and the
//! VQCB file format used to move codebooks between runs.

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clustering::{self, ClusterError, FeatureSet};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("n = {n} exceeds the number of feature rows ({rows})")]
    NExceedsFeatures { n: usize, rows: usize },
    #[error("invalid codebook parameter: {0}")]
    InvalidParam(&'static str),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected VQCB")]
    BadMagic,
    #[error("unsupported codebook format version {0}")]
    UnsupportedVersion(u16),
    #[error("codebook file is truncated")]
    Truncated,
    #[error("unknown init-strategy tag {0}")]
    BadTag(u8),
    #[error("codebook contains non-finite entries")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, CodebookError>;

/// How the entries were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    RandomInit,
    RandomSelection,
    Kmeans,
}

impl InitStrategy {
    fn tag_byte(&self) -> u8 {
        match self {
            InitStrategy::RandomInit => 0,
            InitStrategy::RandomSelection => 1,
            InitStrategy::Kmeans => 2,
        }
    }

    fn from_tag_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(InitStrategy::RandomInit),
            1 => Some(InitStrategy::RandomSelection),
            2 => Some(InitStrategy::Kmeans),
            _ => None,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            InitStrategy::RandomInit => "random-init",
            InitStrategy::RandomSelection => "random-selection",
            InitStrategy::Kmeans => "kmeans",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "random-init" => Some(InitStrategy::RandomInit),
            "random-selection" => Some(InitStrategy::RandomSelection),
            "kmeans" => Some(InitStrategy::Kmeans),
            _ => None,
        }
    }
}

/// N x D entry matrix with a frozen flag and provenance.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub entries: Vec<f32>,
    pub n: usize,
    pub d: usize,
    pub frozen: bool,
    pub init: InitStrategy,
    pub source_dataset: String,
    pub seed: u64,
}

impl Codebook {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.entries[i * self.d..(i + 1) * self.d]
    }

    /// FNV-1a over the entry bytes. Frozen codebooks must keep the same
    /// checksum through an entire training run.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for v in &self.entries {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(CodebookError::InvalidParam("n and d must be >= 1"));
        }
        if self.entries.len() != self.n * self.d {
            return Err(CodebookError::InvalidParam("entry buffer does not match n*d"));
        }
        if self.entries.iter().any(|v| !v.is_finite()) {
            return Err(CodebookError::NonFinite);
        }
        Ok(())
    }
}

/// Entries drawn i.i.d. uniform in `[-1/n, 1/n]`, the conventional VQ
/// trainable-codebook initialization. Callers decide the frozen flag.
pub fn init_random(n: usize, d: usize, seed: u64) -> Codebook {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0f32 / n as f32;
    let entries = (0..n * d).map(|_| rng.gen_range(-bound..bound)).collect();
    Codebook {
        entries,
        n,
        d,
        frozen: false,
        init: InitStrategy::RandomInit,
        source_dataset: String::new(),
        seed,
    }
}

/// N distinct feature rows sampled without replacement.
pub fn init_random_selection(features: &FeatureSet, n: usize, seed: u64) -> Result<Codebook> {
    if n > features.rows {
        return Err(CodebookError::NExceedsFeatures { n, rows: features.rows });
    }
    if n == 0 {
        return Err(CodebookError::InvalidParam("n must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n * features.cols);
    for i in rand::seq::index::sample(&mut rng, features.rows, n) {
        entries.extend_from_slice(features.row(i));
    }
    Ok(Codebook {
        entries,
        n,
        d: features.cols,
        frozen: false,
        init: InitStrategy::RandomSelection,
        source_dataset: features.dataset_id.clone(),
        seed,
    })
}

/// Entries are the k-means cluster centers of the feature set. The mini-batch
/// path handles codebooks far larger than a full Lloyd pass can.
pub fn init_kmeans(features: &FeatureSet, n: usize, seed: u64, minibatch: bool) -> Result<Codebook> {
    if n > features.rows {
        return Err(CodebookError::NExceedsFeatures { n, rows: features.rows });
    }
    let result = if minibatch {
        let batch = 256usize;
        let steps = (8 * n / batch).clamp(200, 1600);
        clustering::minibatch_kmeans_fit(features, n, batch, steps, seed)?
    } else {
        clustering::kmeans_fit(features, n, 100, 1e-4, seed)?
    };
    Ok(Codebook {
        entries: result.centers,
        n,
        d: features.cols,
        frozen: false,
        init: InitStrategy::Kmeans,
        source_dataset: features.dataset_id.clone(),
        seed,
    })
}

/// Trainable affine map `entries . W + bias` from codebook space into the
/// quantization space.
#[derive(Debug, Clone)]
pub struct Projector {
    /// d_in x d_out, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub d_in: usize,
    pub d_out: usize,
    pub use_bias: bool,
}

impl Projector {
    /// Kaiming-uniform fan-in initialization, zero bias.
    pub fn init(d_in: usize, d_out: usize, use_bias: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / d_in as f32).sqrt();
        let weight = (0..d_in * d_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { weight, bias: vec![0.0; d_out], d_in, d_out, use_bias }
    }

    /// Plain (no-tape) application to an `rows x d_in` matrix.
    pub fn apply(&self, entries: &[f32], rows: usize) -> Vec<f32> {
        let (di, do_) = (self.d_in, self.d_out);
        debug_assert_eq!(entries.len(), rows * di);
        let mut out = vec![0.0f32; rows * do_];
        for r in 0..rows {
            let row = &entries[r * di..(r + 1) * di];
            let dst = &mut out[r * do_..(r + 1) * do_];
            if self.use_bias {
                dst.copy_from_slice(&self.bias);
            }
            for (p, &x) in row.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let wrow = &self.weight[p * do_..(p + 1) * do_];
                for (o, &w) in dst.iter_mut().zip(wrow) {
                    *o = (*o as f64 + x as f64 * w as f64) as f32;
                }
            }
        }
        out
    }

    /// Tape application: the entries enter as a constant (frozen codebooks
    /// never receive gradients), the weight and bias as gradient leaves.
    /// Returns the projected matrix plus the parameter leaf ids.
    pub fn apply_on_tape(
        &self,
        tape: &mut Tape,
        entries: &[f32],
        rows: usize,
    ) -> crate::tensor::Result<(TensorId, TensorId, Option<TensorId>)> {
        let e = tape.leaf_f32(entries, &[rows, self.d_in], false)?;
        let w = tape.leaf_f32(&self.weight, &[self.d_in, self.d_out], true)?;
        let b = if self.use_bias {
            Some(tape.leaf_f32(&self.bias, &[self.d_out], true)?)
        } else {
            None
        };
        let out = tape.linear(e, w, b)?;
        Ok((out, w, b))
    }
}

/// Rowwise affine projection of a codebook.
pub fn project(cb: &Codebook, p: &Projector) -> Result<Vec<f32>> {
    if p.d_in != cb.d {
        return Err(CodebookError::InvalidParam("projector input dim does not match codebook"));
    }
    Ok(p.apply(&cb.entries, cb.n))
}

// ---- VQCB file format ----------------------------------------------------
//
// magic "VQCB", version u16, flags u8 (bit0 = frozen), n u32, d u32,
// init-strategy tag u8, seed u64, dataset-id length u32 + UTF-8 bytes,
// then n*d little-endian f32 entries.

const VQCB_MAGIC: &[u8; 4] = b"VQCB";
const VQCB_VERSION: u16 = 1;

pub fn save_codebook(cb: &Codebook, path: impl AsRef<Path>) -> Result<()> {
    cb.validate()?;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_codebook(cb, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_codebook<W: Write>(cb: &Codebook, w: &mut W) -> Result<()> {
    w.write_all(VQCB_MAGIC)?;
    w.write_all(&VQCB_VERSION.to_le_bytes())?;
    w.write_all(&[cb.frozen as u8])?;
    w.write_all(&(cb.n as u32).to_le_bytes())?;
    w.write_all(&(cb.d as u32).to_le_bytes())?;
    w.write_all(&[cb.init.tag_byte()])?;
    w.write_all(&cb.seed.to_le_bytes())?;
    let id = cb.source_dataset.as_bytes();
    w.write_all(&(id.len() as u32).to_le_bytes())?;
    w.write_all(id)?;
    for v in &cb.entries {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    read_codebook(&mut r)
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CodebookError::Truncated
        } else {
            CodebookError::Io(e)
        }
    })
}

pub fn read_codebook<R: Read>(r: &mut R) -> Result<Codebook> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if &magic != VQCB_MAGIC {
        return Err(CodebookError::BadMagic);
    }
    let mut u16b = [0u8; 2];
    read_exact_or_truncated(r, &mut u16b)?;
    let version = u16::from_le_bytes(u16b);
    if version != VQCB_VERSION {
        return Err(CodebookError::UnsupportedVersion(version));
    }
    let mut byte = [0u8; 1];
    read_exact_or_truncated(r, &mut byte)?;
    let frozen = byte[0] != 0;
    let mut u32b = [0u8; 4];
    read_exact_or_truncated(r, &mut u32b)?;
    let n = u32::from_le_bytes(u32b) as usize;
    read_exact_or_truncated(r, &mut u32b)?;
    let d = u32::from_le_bytes(u32b) as usize;
    read_exact_or_truncated(r, &mut byte)?;
    let init = InitStrategy::from_tag_byte(byte[0]).ok_or(CodebookError::BadTag(byte[0]))?;
    let mut u64b = [0u8; 8];
    read_exact_or_truncated(r, &mut u64b)?;
    let seed = u64::from_le_bytes(u64b);
    read_exact_or_truncated(r, &mut u32b)?;
    let id_len = u32::from_le_bytes(u32b) as usize;
    let mut id = vec![0u8; id_len];
    read_exact_or_truncated(r, &mut id)?;
    let source_dataset =
        String::from_utf8(id).map_err(|_| CodebookError::InvalidParam("dataset id is not UTF-8"))?;
    let count = n
        .checked_mul(d)
        .ok_or(CodebookError::InvalidParam("n*d overflows"))?;
    let mut entries = Vec::with_capacity(count);
    let mut f32b = [0u8; 4];
    for _ in 0..count {
        read_exact_or_truncated(r, &mut f32b)?;
        entries.push(f32::from_le_bytes(f32b));
    }
    let cb = Codebook { entries, n, d, frozen, init, source_dataset, seed };
    cb.validate()?;
    Ok(cb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::FeatureSource;

    fn feature_grid() -> FeatureSet {
        let mut data = Vec::new();
        for i in 0..8 {
            data.push(i as f32);
            data.push((i * i) as f32 * 0.1);
        }
        FeatureSet::new(data, 8, 2, FeatureSource::PixelPatch, "grid", 3).unwrap()
    }

    #[test]
    fn random_init_is_seeded_and_bounded() {
        let a = init_random(16, 4, 42);
        let b = init_random(16, 4, 42);
        assert_eq!(a.entries, b.entries);
        let bound = 1.0 / 16.0;
        assert!(a.entries.iter().all(|&v| v >= -bound && v < bound));
        let single = init_random(1, 3, 0);
        assert!(single.entries.iter().all(|&v| v.abs() <= 1.0));
    }

    #[test]
    fn random_selection_is_a_permutation_when_n_equals_rows() {
        let f = feature_grid();
        let cb = init_random_selection(&f, 8, 5).unwrap();
        let mut rows: Vec<Vec<i64>> = cb
            .entries
            .chunks(2)
            .map(|r| r.iter().map(|&v| (v * 10.0).round() as i64).collect())
            .collect();
        rows.sort();
        let mut expected: Vec<Vec<i64>> = (0..8)
            .map(|i| vec![(i as f32 * 10.0).round() as i64, ((i * i) as f32).round() as i64])
            .collect();
        expected.sort();
        assert_eq!(rows, expected);
        assert!(matches!(
            init_random_selection(&f, 9, 0),
            Err(CodebookError::NExceedsFeatures { .. })
        ));

        let c1 = init_random_selection(&f, 3, 7).unwrap();
        let c2 = init_random_selection(&f, 3, 7).unwrap();
        assert_eq!(c1.entries, c2.entries);
    }

    #[test]
    fn kmeans_init_recovers_n_distinct_points() {
        let mut data = Vec::new();
        for &(x, y) in &[(0.0f32, 0.0f32), (10.0, 0.0), (0.0, 10.0)] {
            for _ in 0..4 {
                data.push(x);
                data.push(y);
            }
        }
        let f = FeatureSet::new(data, 12, 2, FeatureSource::PixelPatch, "tri", 0).unwrap();
        let cb = init_kmeans(&f, 3, 17, false).unwrap();
        let mut rows: Vec<(i64, i64)> = cb
            .entries
            .chunks(2)
            .map(|r| (r[0].round() as i64, r[1].round() as i64))
            .collect();
        rows.sort();
        assert_eq!(rows, vec![(0, 0), (0, 10), (10, 0)]);
        assert_eq!(cb.init, InitStrategy::Kmeans);
        assert_eq!(cb.source_dataset, "tri");

        let again = init_kmeans(&f, 3, 17, false).unwrap();
        assert_eq!(cb.entries, again.entries);
    }

    #[test]
    fn projector_identity_and_bias_only() {
        let cb = Codebook {
            entries: vec![1.0, 2.0, 3.0, 4.0],
            n: 2,
            d: 2,
            frozen: true,
            init: InitStrategy::Kmeans,
            source_dataset: "x".into(),
            seed: 0,
        };
        let ident = Projector {
            weight: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
            d_in: 2,
            d_out: 2,
            use_bias: true,
        };
        assert_eq!(project(&cb, &ident).unwrap(), cb.entries);

        let bias_only = Projector {
            weight: vec![0.0; 4],
            bias: vec![0.5, -0.5],
            d_in: 2,
            d_out: 2,
            use_bias: true,
        };
        assert_eq!(project(&cb, &bias_only).unwrap(), vec![0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn projection_is_linear_in_the_codebook() {
        let p = Projector::init(3, 2, false, 9);
        let a: Vec<f32> = vec![0.2, -0.4, 0.6, 1.0, 0.0, -1.0];
        let b: Vec<f32> = vec![0.5, 0.5, -0.25, 0.1, 0.9, 0.3];
        let combo: Vec<f32> = a.iter().zip(&b).map(|(&x, &y)| 2.0 * x + 3.0 * y).collect();
        let pa = p.apply(&a, 2);
        let pb = p.apply(&b, 2);
        let pc = p.apply(&combo, 2);
        for i in 0..pc.len() {
            let expect = 2.0 * pa[i] + 3.0 * pb[i];
            assert!((pc[i] - expect).abs() < 1e-5, "{} vs {}", pc[i], expect);
        }
    }

    #[test]
    fn tape_projection_gradients_reach_projector_not_entries() {
        use crate::tensor::{gradient_check_multi, Tape, TensorId};
        let entries: Vec<f32> = vec![0.3, -0.2, 0.9, 0.5, -0.7, 0.1];
        let proj = Projector::init(3, 2, true, 21);

        // finite differences w.r.t. weight and bias
        let w64: Vec<f64> = proj.weight.iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = proj.bias.iter().map(|&v| v as f64).collect();
        let entries64: Vec<f64> = entries.iter().map(|&v| v as f64).collect();
        let err = gradient_check_multi(
            &|tape: &mut Tape, ids: &[TensorId]| {
                let e = tape.leaf(entries64.clone(), &[2, 3], false)?;
                let out = tape.linear(e, ids[0], Some(ids[1]))?;
                let target = tape.leaf(vec![0.0; 4], &[2, 2], false)?;
                tape.mse(out, target)
            },
            &[(&w64, &[3, 2]), (&b64, &[2])],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "projector fd error {err}");

        // frozen entries never get a gradient buffer
        let mut tape = Tape::new();
        let e = tape.leaf_f32(&entries, &[2, 3], false).unwrap();
        let w = tape.leaf_f32(&proj.weight, &[3, 2], true).unwrap();
        let b = tape.leaf_f32(&proj.bias, &[2], true).unwrap();
        let out = tape.linear(e, w, Some(b)).unwrap();
        let target = tape.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
        let loss = tape.mse(out, target).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_some());
        assert!(tape.grad(b).is_some());
        assert!(tape.grad(e).is_none(), "frozen entries must never hold a gradient");
    }

    #[test]
    fn vqcb_round_trip_is_bit_exact() {
        let mut cb = init_random(5, 3, 77);
        cb.frozen = true;
        cb.source_dataset = "synth-a".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("book.vqcb");
        save_codebook(&cb, &path).unwrap();
        let loaded = load_codebook(&path).unwrap();
        assert_eq!(loaded.entries, cb.entries);
        assert_eq!(loaded.n, cb.n);
        assert_eq!(loaded.d, cb.d);
        assert_eq!(loaded.frozen, cb.frozen);
        assert_eq!(loaded.init, cb.init);
        assert_eq!(loaded.source_dataset, cb.source_dataset);
        assert_eq!(loaded.seed, cb.seed);
        assert_eq!(loaded.checksum(), cb.checksum());
    }

    #[test]
    fn vqcb_rejects_truncation_and_bad_magic() {
        let cb = init_random(4, 2, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("book.vqcb");
        save_codebook(&cb, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = &bytes[..bytes.len() - 5];
        let short = dir.path().join("short.vqcb");
        std::fs::write(&short, cut).unwrap();
        assert!(matches!(load_codebook(&short), Err(CodebookError::Truncated)));

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        let bad = dir.path().join("bad.vqcb");
        std::fs::write(&bad, wrong).unwrap();
        assert!(matches!(load_codebook(&bad), Err(CodebookError::BadMagic)));
    }

    #[test]
    fn checksum_tracks_entry_mutations() {
        let cb = init_random(8, 4, 3);
        let c1 = cb.checksum();
        let mut cb2 = cb.clone();
        assert_eq!(c1, cb2.checksum());
        cb2.entries[0] += 1.0;
        assert_ne!(c1, cb2.checksum());
    }
}
