//! K-means codebook fitting (k-means++ seeding, Lloyd iterations) and
//! nearest-centroid quantization of feature frames into discrete units.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    /// Row-major k×dim centroid matrix.
    pub centroids: Vec<f64>,
    /// Sum of squared distances at the final assignment. Not serialized;
    /// a loaded codebook reports 0.
    #[serde(skip)]
    pub inertia: f64,
}

impl Codebook {
    pub fn centroid(&self, id: usize) -> &[f64] {
        &self.centroids[id * self.dim..(id + 1) * self.dim]
    }

    /// Maps each `dim`-length row to its nearest centroid (squared
    /// euclidean); exact ties go to the lowest centroid id.
    pub fn quantize(&self, rows: &[f64]) -> Result<Vec<usize>> {
        if self.dim == 0 || rows.len() % self.dim != 0 {
            return Err(Error::InvalidInput(format!(
                "quantize: {} values do not form rows of dim {}",
                rows.len(),
                self.dim
            )));
        }
        let n = rows.len() / self.dim;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &rows[i * self.dim..(i + 1) * self.dim];
            let mut best = 0usize;
            let mut best_d = sq_dist(row, self.centroid(0));
            for c in 1..self.k {
                let d = sq_dist(row, self.centroid(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Corrupt(format!("serialize codebook: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cb: Codebook = serde_json::from_str(&raw)
            .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
        if cb.k < 2 || cb.dim == 0 || cb.centroids.len() != cb.k * cb.dim {
            return Err(Error::Corrupt(format!(
                "{}: inconsistent codebook (k={}, dim={}, {} centroid values)",
                path.display(),
                cb.k,
                cb.dim,
                cb.centroids.len()
            )));
        }
        Ok(cb)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fits a codebook with k-means++ seeding followed by Lloyd iterations.
/// Stops at `max_iters` or when assignments reach a fixpoint. Returns the
/// codebook together with the inertia recorded after each assignment step.
pub fn kmeans_fit_with_trace(
    rows: &[f64],
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Codebook, Vec<f64>)> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(Error::InvalidInput(format!(
            "kmeans_fit: {} values do not form rows of dim {dim}",
            rows.len()
        )));
    }
    let n = rows.len() / dim;
    if k < 2 {
        return Err(Error::InvalidConfig(format!("kmeans_fit: k must be ≥ 2, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidInput(format!(
            "kmeans_fit: {n} rows is fewer than k = {k}"
        )));
    }
    let row = |i: usize| &rows[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding: first centroid uniform, then proportional to the
    // squared distance to the nearest chosen centroid.
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidInput(
                "kmeans_fit: fewer than k distinct rows".into(),
            ));
        }
        let mut target = rng.random_range(0.0..total);
        let mut chosen = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if target < w {
                chosen = i;
                break;
            }
            target -= w;
        }
        let c = row(chosen).to_vec();
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }

    let mut assign = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        // Assignment step.
        let mut inertia = 0.0;
        let mut changed = false;
        for i in 0..n {
            let r = row(i);
            let mut best = 0usize;
            let mut best_d = sq_dist(r, &centroids[0..dim]);
            for c in 1..k {
                let d = sq_dist(r, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            inertia += best_d;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        trace.push(inertia);
        if !changed {
            break;
        }
        // Update step; an empty cluster keeps its previous centroid.
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for j in 0..dim {
                sums[c * dim + j] += rows[i * dim + j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }

    let inertia = *trace.last().expect("at least one iteration");
    Ok((
        Codebook {
            k,
            dim,
            centroids,
            inertia,
        },
        trace,
    ))
}

pub fn kmeans_fit(rows: &[f64], dim: usize, k: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    kmeans_fit_with_trace(rows, dim, k, max_iters, seed).map(|(cb, _)| cb)
}
