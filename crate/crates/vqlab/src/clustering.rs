//! K-means machinery that turns a feature set into codebook entries.
//!
//! Full-batch Lloyd iterations with k-means++ seeding for desk-scale feature
//! sets, and a mini-batch variant (per-center 1/count learning rates) that
//! scales to codebooks with 100k entries. Assignments run through the same
//! batched nearest-entry search the quantizer uses.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::quantizer::{self, Metric};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k = {k} exceeds the number of points ({points})")]
    KExceedsPoints { k: usize, points: usize },
    #[error("invalid clustering parameter: {0}")]
    InvalidParam(&'static str),
    #[error("feature set contains non-finite values")]
    NonFinite,
    #[error("feature data length {len} is not rows*cols = {rows}x{cols}")]
    BadShape { len: usize, rows: usize, cols: usize },
    #[error(transparent)]
    Search(#[from] quantizer::QuantizerError),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

/// Where a feature row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    PixelPatch,
    TinyEncoder,
    ImportedFile,
}

impl FeatureSource {
    pub fn tag(&self) -> &'static str {
        match self {
            FeatureSource::PixelPatch => "pixel-patch",
            FeatureSource::TinyEncoder => "tiny-encoder",
            FeatureSource::ImportedFile => "imported-file",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "pixel-patch" => Some(FeatureSource::PixelPatch),
            "tiny-encoder" => Some(FeatureSource::TinyEncoder),
            "imported-file" => Some(FeatureSource::ImportedFile),
            _ => None,
        }
    }
}

/// P feature rows of dimension D plus provenance.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub data: Vec<f32>,
    pub rows: usize,
    pub cols: usize,
    pub source: FeatureSource,
    pub dataset_id: String,
    pub seed: u64,
}

impl FeatureSet {
    pub fn new(
        data: Vec<f32>,
        rows: usize,
        cols: usize,
        source: FeatureSource,
        dataset_id: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(ClusterError::InvalidParam("rows and cols must be >= 1"));
        }
        if data.len() != rows * cols {
            return Err(ClusterError::BadShape { len: data.len(), rows, cols });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ClusterError::NonFinite);
        }
        Ok(Self { data, rows, cols, source, dataset_id: dataset_id.into(), seed })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Output of a k-means fit.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// K x D row-major centers.
    pub centers: Vec<f32>,
    pub k: usize,
    pub cols: usize,
    /// Cluster index per input row, consistent with `centers`.
    pub assignments: Vec<u32>,
    /// Sum of squared distances from each point to its assigned center.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Pre-update objective per iteration, for monotonicity checks.
    pub inertia_history: Vec<f64>,
    /// Iterations on which an empty cluster was reseeded.
    pub reseed_iterations: Vec<usize>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc
}

/// k-means++ seeding: first center uniform, each next chosen with probability
/// proportional to the squared distance to the nearest already-chosen center.
/// Fixed seeds give bit-identical centers.
pub fn kmeans_pp_init(features: &FeatureSet, k: usize, seed: u64) -> Result<Vec<f32>> {
    let (p, d) = (features.rows, features.cols);
    if k > p {
        return Err(ClusterError::KExceedsPoints { k, points: p });
    }
    if k == 0 {
        return Err(ClusterError::InvalidParam("k must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; p];

    let first = rng.gen_range(0..p);
    chosen.push(first);
    taken[first] = true;

    let mut dist2: Vec<f64> = (0..p).map(|i| sq_dist(features.row(i), features.row(first))).collect();
    while chosen.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = usize::MAX;
            for (i, &w) in dist2.iter().enumerate() {
                acc += w;
                if acc >= r {
                    pick = i;
                    break;
                }
            }
            if pick == usize::MAX || taken[pick] {
                // rounding landed on a taken point; fall back to any unchosen
                (0..p).find(|&i| !taken[i]).expect("k <= p leaves an unchosen point")
            } else {
                pick
            }
        } else {
            // duplicate-heavy data: every point coincides with a center
            let remaining: Vec<usize> = (0..p).filter(|&i| !taken[i]).collect();
            remaining[rng.gen_range(0..remaining.len())]
        };
        taken[next] = true;
        chosen.push(next);
        for i in 0..p {
            let d2 = sq_dist(features.row(i), features.row(next));
            if d2 < dist2[i] {
                dist2[i] = d2;
            }
        }
    }

    let mut centers = Vec::with_capacity(k * d);
    for &i in &chosen {
        centers.extend_from_slice(features.row(i));
    }
    Ok(centers)
}

fn assign(features: &FeatureSet, centers: &[f32]) -> Result<(Vec<u32>, Vec<f32>)> {
    let map = quantizer::quantize(&features.data, centers, features.cols, Metric::L2)?;
    Ok((map.indices, map.distances))
}

/// Reseed each empty center to the point farthest from its assigned center,
/// taking distinct points in decreasing distance order.
fn reseed_empty(features: &FeatureSet, centers: &mut [f32], counts: &[usize], distances: &[f32]) -> bool {
    let d = features.cols;
    let empties: Vec<usize> = counts.iter().enumerate().filter(|(_, &c)| c == 0).map(|(i, _)| i).collect();
    if empties.is_empty() {
        return false;
    }
    let mut order: Vec<usize> = (0..features.rows).collect();
    order.sort_unstable_by(|&a, &b| distances[b].partial_cmp(&distances[a]).unwrap().then(a.cmp(&b)));
    for (slot, &center_idx) in empties.iter().enumerate() {
        let point = order[slot.min(order.len() - 1)];
        centers[center_idx * d..(center_idx + 1) * d].copy_from_slice(features.row(point));
    }
    true
}

/// Full-batch Lloyd iterations from a k-means++ seeding. Stops when the
/// maximum center shift drops below `tol` or after `max_iters` assignment
/// passes. Empty clusters are reseeded to the farthest point and the
/// iteration repeated, so every returned center has at least one assigned
/// point.
pub fn kmeans_fit(
    features: &FeatureSet,
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<ClusterResult> {
    if max_iters == 0 {
        return Err(ClusterError::InvalidParam("max_iters must be >= 1"));
    }
    let (p, d) = (features.rows, features.cols);
    if k > p {
        return Err(ClusterError::KExceedsPoints { k, points: p });
    }
    let mut centers = kmeans_pp_init(features, k, seed)?;
    let mut inertia_history = Vec::new();
    let mut reseed_iterations = Vec::new();
    let mut iterations_run = 0usize;
    let mut assignments = vec![0u32; p];
    let mut inertia = f64::INFINITY;

    let mut pass = 0usize;
    while pass < max_iters {
        let (idx, dist) = assign(features, &centers)?;
        let mut counts = vec![0usize; k];
        for &c in &idx {
            counts[c as usize] += 1;
        }
        if counts.iter().any(|&c| c == 0) {
            reseed_empty(features, &mut centers, &counts, &dist);
            reseed_iterations.push(iterations_run);
            pass += 1;
            continue;
        }

        inertia_history.push(dist.iter().map(|&v| v as f64).sum());

        // update step: centers become the means of their assigned points
        let mut sums = vec![0.0f64; k * d];
        for (i, &c) in idx.iter().enumerate() {
            let row = features.row(i);
            let dst = &mut sums[c as usize * d..(c as usize + 1) * d];
            for (s, &v) in dst.iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        let mut movement = 0.0f64;
        let mut new_centers = vec![0.0f32; k * d];
        for c in 0..k {
            let cnt = counts[c] as f64;
            let mut shift = 0.0f64;
            for j in 0..d {
                let m = sums[c * d + j] / cnt;
                let old = centers[c * d + j] as f64;
                shift += (m - old) * (m - old);
                new_centers[c * d + j] = m as f32;
            }
            movement = movement.max(shift.sqrt());
        }
        centers = new_centers;

        // objective consistent with the returned (centers, assignments) pair
        inertia = idx
            .iter()
            .enumerate()
            .map(|(i, &c)| sq_dist(features.row(i), &centers[c as usize * d..(c as usize + 1) * d]))
            .sum();
        assignments = idx;
        iterations_run += 1;
        pass += 1;
        if movement < tol {
            break;
        }
    }

    Ok(ClusterResult {
        centers,
        k,
        cols: d,
        assignments,
        inertia,
        iterations_run,
        inertia_history,
        reseed_iterations,
    })
}

/// Mini-batch k-means with the standard per-center 1/count learning rate.
/// Centers start from a seeded random selection of distinct rows; each batch
/// samples rows without replacement (a batch of P covers the full data). A
/// final full pass produces the assignments, and empty centers are reseeded
/// until every center owns at least one point.
pub fn minibatch_kmeans_fit(
    features: &FeatureSet,
    k: usize,
    batch: usize,
    steps: usize,
    seed: u64,
) -> Result<ClusterResult> {
    let (p, d) = (features.rows, features.cols);
    if k > p {
        return Err(ClusterError::KExceedsPoints { k, points: p });
    }
    if batch == 0 {
        return Err(ClusterError::InvalidParam("batch must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(k * d);
    for i in rand::seq::index::sample(&mut rng, p, k) {
        centers.extend_from_slice(features.row(i));
    }

    let batch = batch.min(p);
    let mut counts = vec![0u64; k];
    let mut batch_rows = vec![0.0f32; batch * d];
    for _ in 0..steps {
        let picks = rand::seq::index::sample(&mut rng, p, batch);
        for (slot, i) in picks.into_iter().enumerate() {
            batch_rows[slot * d..(slot + 1) * d].copy_from_slice(features.row(i));
        }
        let map = quantizer::quantize(&batch_rows, &centers, d, Metric::L2)?;
        for (slot, &c) in map.indices.iter().enumerate() {
            let c = c as usize;
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            let row = &batch_rows[slot * d..(slot + 1) * d];
            let dst = &mut centers[c * d..(c + 1) * d];
            for (cv, &x) in dst.iter_mut().zip(row) {
                *cv = (*cv as f64 + eta * (x as f64 - *cv as f64)) as f32;
            }
        }
    }

    // full pass for assignments; repair any center the data never reaches
    let mut assignments;
    let mut distances;
    let mut rounds = 0;
    loop {
        let (idx, dist) = assign(features, &centers)?;
        let mut final_counts = vec![0usize; k];
        for &c in &idx {
            final_counts[c as usize] += 1;
        }
        assignments = idx;
        distances = dist;
        if !final_counts.iter().any(|&c| c == 0) || rounds >= 5 {
            break;
        }
        reseed_empty(features, &mut centers, &final_counts, &distances);
        rounds += 1;
    }

    let inertia = distances.iter().map(|&v| v as f64).sum();
    Ok(ClusterResult {
        centers,
        k,
        cols: d,
        assignments,
        inertia,
        iterations_run: steps,
        inertia_history: Vec::new(),
        reseed_iterations: Vec::new(),
    })
}
