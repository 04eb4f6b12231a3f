//! The four quantization regimes behind one batched nearest-entry search.
//!
//! The search computes squared L2 distances in blocked f32 using the
//! `|z|^2 - 2 z.b + |b|^2` expansion with per-block running minima. Whenever
//! the gap between a row's two smallest distances falls inside the f32 error
//! bound, that row is re-scanned with direct f64 arithmetic, so returned
//! indices always equal a double-precision brute-force argmin under the
//! lowest-index tie-break. Reported distances are recomputed in f64 for the
//! winning entry only.

use thiserror::Error;

use crate::codebook::{Codebook, Projector};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("feature length {len} is not a multiple of dim {dim}")]
    BadFeatureShape { len: usize, dim: usize },
    #[error("codebook length {len} is not a multiple of dim {dim}")]
    BadCodebookShape { len: usize, dim: usize },
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("m = {m} exceeds codebook size {n}")]
    MTooLarge { m: usize, n: usize },
    #[error("token index {index} out of range for codebook size {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("EMA update requires a trainable codebook (this one is frozen)")]
    FrozenCodebook,
    #[error("token map covers {tokens} tokens but {rows} feature rows were given")]
    TokenFeatureMismatch { tokens: usize, rows: usize },
    #[error("invalid quantizer state: {0}")]
    InvalidState(&'static str),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, QuantizerError>;

/// Distance used for nearest-entry selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Squared Euclidean distance.
    L2,
    /// `1 - cos(z, b)`, in `[0, 2]`; zero-norm rows count as orthogonal.
    Cosine,
}

/// Grid of codebook indices with the squared distance (or cosine distance)
/// of each token to its entry.
#[derive(Debug, Clone)]
pub struct TokenMap {
    pub indices: Vec<u32>,
    pub distances: Vec<f32>,
    pub h: usize,
    pub w: usize,
    pub codebook_size: usize,
}

impl TokenMap {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Reinterpret a flat map as an h x w grid.
    pub fn with_grid(mut self, h: usize, w: usize) -> Self {
        debug_assert_eq!(h * w, self.indices.len());
        self.h = h;
        self.w = w;
        self
    }
}

struct Dims {
    t: usize,
    n: usize,
}

fn check_dims(features: &[f32], codebook: &[f32], dim: usize) -> Result<Dims> {
    if dim == 0 || features.len() % dim != 0 {
        return Err(QuantizerError::BadFeatureShape { len: features.len(), dim });
    }
    if codebook.is_empty() {
        return Err(QuantizerError::EmptyCodebook);
    }
    if codebook.len() % dim != 0 {
        return Err(QuantizerError::BadCodebookShape { len: codebook.len(), dim });
    }
    Ok(Dims { t: features.len() / dim, n: codebook.len() / dim })
}

/// Codebook transposed to column-major (`dim` rows of `n` entries), so the
/// per-query dot products stream contiguously across entries.
struct TransposedCodebook {
    cols: Vec<f32>,
    n: usize,
}

impl TransposedCodebook {
    fn build(codebook: &[f32], dim: usize, n: usize) -> Self {
        let mut cols = vec![0.0f32; dim * n];
        for (j, row) in codebook.chunks_exact(dim).enumerate() {
            for (k, &v) in row.iter().enumerate() {
                cols[k * n + j] = v;
            }
        }
        Self { cols, n }
    }

    #[inline]
    fn dim_slice(&self, k: usize, start: usize, len: usize) -> &[f32] {
        &self.cols[k * self.n + start..k * self.n + start + len]
    }
}

fn sq_norms(rows: &[f32], dim: usize) -> Vec<f32> {
    rows.chunks_exact(dim)
        .map(|r| r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() as f32)
        .collect()
}

fn l2_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc
}

fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na <= 1e-24 || nb <= 1e-24 {
        return 1.0;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Exact distance in f64, matching the definitions the fast path approximates.
fn exact_distance(metric: Metric, z: &[f32], b: &[f32]) -> f64 {
    match metric {
        Metric::L2 => l2_f64(z, b),
        Metric::Cosine => cosine_f64(z, b),
    }
}

/// Full-precision scan of one feature row; the authoritative slow path.
fn rescan_row(metric: Metric, z: &[f32], codebook: &[f32], dim: usize) -> (u32, f64) {
    let mut best = f64::INFINITY;
    let mut best_idx = 0u32;
    for (j, b) in codebook.chunks_exact(dim).enumerate() {
        let d = exact_distance(metric, z, b);
        if d < best {
            best = d;
            best_idx = j as u32;
        }
    }
    (best_idx, best)
}

const BLOCK_COLS: usize = 2048;

fn quantize_rows(
    features: &[f32],
    codebook: &[f32],
    bt: &TransposedCodebook,
    dim: usize,
    metric: Metric,
    t: usize,
    n: usize,
    bnorm: &[f32],
    max_bnorm: f32,
) -> (Vec<u32>, Vec<f32>) {
    let mut min1 = vec![f32::INFINITY; t];
    let mut min2 = vec![f32::INFINITY; t];
    let mut best = vec![0u32; t];

    let znorm = sq_norms(features, dim);
    // inverse norms for cosine; zero-norm entries count as orthogonal
    let inv_bnorm: Vec<f32> = match metric {
        Metric::Cosine => bnorm
            .iter()
            .map(|&b| if b <= 1e-24 { 0.0 } else { 1.0 / b.sqrt() })
            .collect(),
        Metric::L2 => Vec::new(),
    };

    let mut acc = vec![0.0f32; BLOCK_COLS];
    let mut block_start = 0usize;
    while block_start < n {
        let cols = BLOCK_COLS.min(n - block_start);
        for i in 0..t {
            let z = &features[i * dim..(i + 1) * dim];
            let accs = &mut acc[..cols];
            accs.fill(0.0);
            for (k, &zk) in z.iter().enumerate() {
                let btk = bt.dim_slice(k, block_start, cols);
                for (a, &b) in accs.iter_mut().zip(btk) {
                    *a += zk * b;
                }
            }

            let mut m1 = min1[i];
            let mut m2 = min2[i];
            let mut bi = best[i];
            match metric {
                Metric::L2 => {
                    let zn = znorm[i];
                    let bn = &bnorm[block_start..block_start + cols];
                    for (j, (&a, &b)) in accs.iter().zip(bn).enumerate() {
                        let d = zn - 2.0 * a + b;
                        if d < m2 {
                            if d < m1 {
                                m2 = m1;
                                m1 = d;
                                bi = (block_start + j) as u32;
                            } else {
                                m2 = d;
                            }
                        }
                    }
                }
                Metric::Cosine => {
                    let nz = znorm[i].sqrt();
                    let inv_nz = if nz <= 1e-12 { 0.0 } else { 1.0 / nz };
                    let ib = &inv_bnorm[block_start..block_start + cols];
                    for (j, (&a, &inv)) in accs.iter().zip(ib).enumerate() {
                        let d = 1.0 - a * inv_nz * inv;
                        if d < m2 {
                            if d < m1 {
                                m2 = m1;
                                m1 = d;
                                bi = (block_start + j) as u32;
                            } else {
                                m2 = d;
                            }
                        }
                    }
                }
            }
            min1[i] = m1;
            min2[i] = m2;
            best[i] = bi;
        }
        block_start += cols;
    }

    // Guard: when the two running minima are closer than the worst-case f32
    // error of the expansion, the winner is decided by an exact rescan.
    let eps = f32::EPSILON;
    let mut indices = Vec::with_capacity(t);
    let mut distances = Vec::with_capacity(t);
    for i in 0..t {
        let z = &features[i * dim..(i + 1) * dim];
        let tau = match metric {
            Metric::L2 => 4.0 * eps * (dim as f32 + 8.0) * (znorm[i] + max_bnorm + 1.0),
            Metric::Cosine => 8.0 * eps * (dim as f32 + 8.0),
        };
        let ambiguous = !(min2[i] - min1[i] > tau);
        let (idx, dist) = if ambiguous {
            rescan_row(metric, z, codebook, dim)
        } else {
            let idx = best[i];
            let b = &codebook[idx as usize * dim..(idx as usize + 1) * dim];
            (idx, exact_distance(metric, z, b))
        };
        indices.push(idx);
        distances.push(dist as f32);
    }
    (indices, distances)
}

/// Map each feature row to its nearest codebook entry. Ties break toward the
/// lowest index; returned indices exactly match a double-precision
/// brute-force argmin.
pub fn quantize(features: &[f32], codebook: &[f32], dim: usize, metric: Metric) -> Result<TokenMap> {
    let Dims { t, n } = check_dims(features, codebook, dim)?;
    let bnorm = sq_norms(codebook, dim);
    let max_bnorm = bnorm.iter().fold(0.0f32, |a, &b| a.max(b));
    let bt = TransposedCodebook::build(codebook, dim, n);
    let (indices, distances) = quantize_rows(features, codebook, &bt, dim, metric, t, n, &bnorm, max_bnorm);
    Ok(TokenMap { indices, distances, h: 1, w: t, codebook_size: n })
}

/// Row-parallel variant. Each row is independent, so results are identical
/// to [`quantize`] for any thread count.
pub fn quantize_with_threads(
    features: &[f32],
    codebook: &[f32],
    dim: usize,
    metric: Metric,
    threads: usize,
) -> Result<TokenMap> {
    let Dims { t, n } = check_dims(features, codebook, dim)?;
    if threads <= 1 || t < 2 {
        return quantize(features, codebook, dim, metric);
    }
    let bnorm = sq_norms(codebook, dim);
    let max_bnorm = bnorm.iter().fold(0.0f32, |a, &b| a.max(b));
    let bt = TransposedCodebook::build(codebook, dim, n);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|_| QuantizerError::InvalidState("failed to build thread pool"))?;
    let chunk = t.div_ceil(threads);
    let results: Vec<(Vec<u32>, Vec<f32>)> = pool.install(|| {
        use rayon::prelude::*;
        features
            .par_chunks(chunk * dim)
            .map(|rows| {
                let rt = rows.len() / dim;
                quantize_rows(rows, codebook, &bt, dim, metric, rt, n, &bnorm, max_bnorm)
            })
            .collect()
    });
    let mut indices = Vec::with_capacity(t);
    let mut distances = Vec::with_capacity(t);
    for (idx, dist) in results {
        indices.extend(idx);
        distances.extend(dist);
    }
    Ok(TokenMap { indices, distances, h: 1, w: t, codebook_size: n })
}

/// The M nearest entries per feature row, sorted by ascending distance with
/// ties broken toward lower indices. Column 0 equals [`quantize`].
#[derive(Debug, Clone)]
pub struct Knn {
    pub indices: Vec<u32>,
    pub distances: Vec<f32>,
    pub t: usize,
    pub m: usize,
}

impl Knn {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.m..(i + 1) * self.m]
    }
}

pub fn knn(features: &[f32], codebook: &[f32], dim: usize, m: usize, metric: Metric) -> Result<Knn> {
    let Dims { t, n } = check_dims(features, codebook, dim)?;
    if m > n {
        return Err(QuantizerError::MTooLarge { m, n });
    }
    if m == 0 {
        return Err(QuantizerError::MTooLarge { m, n });
    }
    let mut indices = Vec::with_capacity(t * m);
    let mut distances = Vec::with_capacity(t * m);
    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(n);
    for z in features.chunks_exact(dim) {
        scored.clear();
        for (j, b) in codebook.chunks_exact(dim).enumerate() {
            scored.push((exact_distance(metric, z, b), j as u32));
        }
        let take = m.min(scored.len());
        scored.select_nth_unstable_by(take - 1, |a, b| a.partial_cmp(b).unwrap());
        scored[..take].sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        for &(d, j) in &scored[..take] {
            indices.push(j);
            distances.push(d as f32);
        }
    }
    Ok(Knn { indices, distances, t, m })
}

// ---- EMA codebook maintenance ------------------------------------------

/// Running cluster-size and feature-sum averages backing the EMA regime.
/// Entry `i` of the codebook equals `sums_i / max(counts_i, epsilon)` after
/// every update.
#[derive(Debug, Clone)]
pub struct EmaStats {
    pub counts: Vec<f32>,
    pub sums: Vec<f32>,
    pub gamma: f32,
    pub epsilon: f32,
}

impl EmaStats {
    /// Seed the averages from the codebook itself: unit counts and sums equal
    /// to the entries, so an entry without traffic stays where it started.
    pub fn new(codebook: &Codebook, gamma: f32) -> Self {
        Self {
            counts: vec![1.0; codebook.n],
            sums: codebook.entries.clone(),
            gamma,
            epsilon: 1e-5,
        }
    }
}

/// One EMA step: decay every running average toward this batch's per-entry
/// counts and feature sums, then rewrite the entries that were assigned at
/// least one token. Untouched entries are bit-identical afterwards.
pub fn ema_update(
    stats: &mut EmaStats,
    codebook: &mut Codebook,
    token_map: &TokenMap,
    features: &[f32],
) -> Result<()> {
    if codebook.frozen {
        return Err(QuantizerError::FrozenCodebook);
    }
    let d = codebook.d;
    let n = codebook.n;
    if features.len() != token_map.len() * d {
        return Err(QuantizerError::TokenFeatureMismatch {
            tokens: token_map.len(),
            rows: features.len() / d.max(1),
        });
    }
    let mut batch_counts = vec![0.0f64; n];
    let mut batch_sums = vec![0.0f64; n * d];
    for (row, &idx) in token_map.indices.iter().enumerate() {
        let i = idx as usize;
        if i >= n {
            return Err(QuantizerError::IndexOutOfRange { index: i, n });
        }
        batch_counts[i] += 1.0;
        let src = &features[row * d..(row + 1) * d];
        let dst = &mut batch_sums[i * d..(i + 1) * d];
        for (s, &v) in dst.iter_mut().zip(src) {
            *s += v as f64;
        }
    }
    let g = stats.gamma as f64;
    for i in 0..n {
        let c = g * stats.counts[i] as f64 + (1.0 - g) * batch_counts[i];
        stats.counts[i] = c as f32;
        let sums = &mut stats.sums[i * d..(i + 1) * d];
        for (s, &b) in sums.iter_mut().zip(&batch_sums[i * d..(i + 1) * d]) {
            *s = (g * *s as f64 + (1.0 - g) * b) as f32;
        }
        if batch_counts[i] > 0.0 {
            let denom = (stats.counts[i].max(stats.epsilon)) as f64;
            let entry = &mut codebook.entries[i * d..(i + 1) * d];
            for (e, &s) in entry.iter_mut().zip(stats.sums[i * d..(i + 1) * d].iter()) {
                *e = (s as f64 / denom) as f32;
            }
        }
    }
    Ok(())
}

// ---- variants, losses, utilization ---------------------------------------

/// Codebook update regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerVariant {
    /// Trainable codebook updated by gradient descent.
    Gd,
    /// Factorized codes: trainable low-dimensional codebook behind an
    /// encoder-side projection.
    Fc,
    /// Codebook maintained by exponential moving averages; never sees
    /// gradients.
    Ema,
    /// Large frozen codebook mapped through a trainable projector.
    Lc,
}

impl QuantizerVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            QuantizerVariant::Gd => "gd",
            QuantizerVariant::Fc => "fc",
            QuantizerVariant::Ema => "ema",
            QuantizerVariant::Lc => "lc",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "gd" => Some(QuantizerVariant::Gd),
            "fc" => Some(QuantizerVariant::Fc),
            "ema" => Some(QuantizerVariant::Ema),
            "lc" => Some(QuantizerVariant::Lc),
            _ => None,
        }
    }
}

impl std::fmt::Display for QuantizerVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Variant tag plus the variant-specific machinery.
///
/// The ablation arms in the experiment runners relax the pairing of
/// `frozen`/`projector` (static codebook without projector, trainable
/// codebook with projector); [`QuantizerState::new`] enforces the strict
/// pairings for the four named regimes.
#[derive(Debug, Clone)]
pub struct QuantizerState {
    pub variant: QuantizerVariant,
    pub codebook: Codebook,
    pub projector: Option<Projector>,
    pub ema: Option<EmaStats>,
    pub metric: Metric,
    pub alpha: f32,
    pub beta: f32,
}

impl QuantizerState {
    pub fn new(
        variant: QuantizerVariant,
        mut codebook: Codebook,
        projector: Option<Projector>,
        metric: Metric,
        alpha: f32,
        beta: f32,
        gamma: f32,
    ) -> Result<Self> {
        if alpha <= 0.0 || beta <= 0.0 {
            return Err(QuantizerError::InvalidState("alpha and beta must be positive"));
        }
        match variant {
            QuantizerVariant::Lc => {
                if projector.is_none() {
                    return Err(QuantizerError::InvalidState("lc requires a projector"));
                }
                codebook.frozen = true;
            }
            QuantizerVariant::Gd | QuantizerVariant::Fc | QuantizerVariant::Ema => {
                if codebook.frozen {
                    return Err(QuantizerError::InvalidState("gd/fc/ema require a trainable codebook"));
                }
                if projector.is_some() {
                    return Err(QuantizerError::InvalidState("only lc uses a codebook projector"));
                }
            }
        }
        let ema = match variant {
            QuantizerVariant::Ema => Some(EmaStats::new(&codebook, gamma)),
            _ => None,
        };
        Ok(Self { variant, codebook, projector, ema, metric, alpha, beta })
    }

    /// Dimension of the space quantization happens in.
    pub fn effective_dim(&self) -> usize {
        self.projector.as_ref().map_or(self.codebook.d, |p| p.d_out)
    }

    /// Effective codebook matrix (projected when a projector is present).
    pub fn effective_codebook(&self) -> Vec<f32> {
        match &self.projector {
            Some(p) => p.apply(&self.codebook.entries, self.codebook.n),
            None => self.codebook.entries.clone(),
        }
    }
}

/// Per-variant quantization loss on the tape.
///
/// `gd`/`fc`/`lc`: `alpha * mse(sg(z_q), z) + beta * mse(sg(z), z_q)`.
/// `ema`: `alpha * mse(sg(z_q), z)` only; the codebook path gets no gradient.
pub fn quantization_loss(
    tape: &mut Tape,
    variant: QuantizerVariant,
    z_pre: TensorId,
    z_q: TensorId,
    alpha: f64,
    beta: f64,
) -> Result<TensorId> {
    let sg_q = tape.stop_gradient(z_q)?;
    let commit = tape.mse(sg_q, z_pre)?;
    let commit = tape.scale(commit, alpha)?;
    match variant {
        QuantizerVariant::Ema => Ok(commit),
        _ => {
            let sg_z = tape.stop_gradient(z_pre)?;
            let pull = tape.mse(sg_z, z_q)?;
            let pull = tape.scale(pull, beta)?;
            Ok(tape.add(commit, pull)?)
        }
    }
}

/// Per-epoch utilization: entry `i` counts as used when at least one token
/// selected it. Returns the used mask and raw counts.
pub fn utilization_sets(maps: &[&TokenMap], n: usize) -> Result<(Vec<bool>, Vec<u64>)> {
    let mut counts = vec![0u64; n];
    for map in maps {
        for &idx in &map.indices {
            let i = idx as usize;
            if i >= n {
                return Err(QuantizerError::IndexOutOfRange { index: i, n });
            }
            counts[i] += 1;
        }
    }
    let used: Vec<bool> = counts.iter().map(|&c| c >= 1).collect();
    Ok((used, counts))
}

pub fn utilization_rate(used: &[bool]) -> f64 {
    if used.is_empty() {
        return 0.0;
    }
    used.iter().filter(|&&u| u).count() as f64 / used.len() as f64
}
