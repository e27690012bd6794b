use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RetrievalError;

pub const MAX_ITERATIONS: usize = 100;
pub const SHIFT_TOLERANCE: f64 = 1e-6;
/// Lloyd iterations run on a seeded random subset of at most this many
/// descriptors; the inertia history refers to that subset.
pub const MAX_TRAINING_DESCRIPTORS: usize = 6000;

/// k-means centroids over local descriptors ("visual words").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub seed: u64,
    pub inertia: f64,
    /// Objective after every assignment step, ending with the final centroids.
    pub inertia_history: Vec<f64>,
}

impl Vocabulary {
    pub fn centroid(&self, w: usize) -> &[f64] {
        &self.centroids[w * self.dim..(w + 1) * self.dim]
    }

    /// Nearest word by squared L2; ties go to the lower word id.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        nearest(&self.centroids, self.dim, v)
    }
}

/// Squared L2 with four independent accumulators so the loop vectorizes.
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn nearest(centroids: &[f64], dim: usize, v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (w, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (w, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until every centroid moves
/// less than [`SHIFT_TOLERANCE`] or [`MAX_ITERATIONS`] is reached.
pub fn build_vocabulary(data: &[Vec<f64>], k: usize, seed: u64) -> Result<Vocabulary, RetrievalError> {
    if k < 2 {
        return Err(RetrievalError::InvalidK(k));
    }
    if data.len() < k {
        return Err(RetrievalError::TooFewDescriptors { have: data.len(), need: k });
    }
    let dim = data[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<&[f64]> = if data.len() > MAX_TRAINING_DESCRIPTORS {
        let picked = rand::seq::index::sample(&mut rng, data.len(), MAX_TRAINING_DESCRIPTORS);
        let mut picked = picked.into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| data[i].as_slice()).collect()
    } else {
        data.iter().map(Vec::as_slice).collect()
    };

    // k-means++: each new centroid drawn with probability ∝ D².
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..data.len());
    centroids.extend_from_slice(data[first]);
    let mut d2: Vec<f64> = data.iter().map(|v| sq_dist(v, data[first])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(RetrievalError::TooFewDescriptors { have: centroids.len() / dim, need: k });
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < d {
                break;
            }
            target -= d;
        }
        let pick = pick.expect("total > 0 implies a positive entry");
        let start = centroids.len();
        centroids.extend_from_slice(data[pick]);
        for (i, v) in data.iter().enumerate() {
            let d = sq_dist(v, &centroids[start..start + dim]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assign = vec![0usize; data.len()];
    let mut history = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let mut inertia = 0.0;
        for (i, v) in data.iter().enumerate() {
            let (w, d) = nearest(&centroids, dim, v);
            assign[i] = w;
            inertia += d;
        }
        history.push(inertia);

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (v, &w) in data.iter().zip(&assign) {
            counts[w] += 1;
            for (s, x) in sums[w * dim..(w + 1) * dim].iter_mut().zip(v.iter()) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for w in 0..k {
            // An empty cluster keeps its previous centroid.
            if counts[w] == 0 {
                continue;
            }
            let n = counts[w] as f64;
            let mut moved = 0.0;
            for j in 0..dim {
                let c = sums[w * dim + j] / n;
                moved += (c - centroids[w * dim + j]).powi(2);
                centroids[w * dim + j] = c;
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }
    let inertia: f64 = data.iter().map(|v| nearest(&centroids, dim, v).1).sum();
    history.push(inertia);

    for a in 0..k {
        for b in a + 1..k {
            if centroids[a * dim..(a + 1) * dim] == centroids[b * dim..(b + 1) * dim] {
                return Err(RetrievalError::DuplicateCentroids(a, b));
            }
        }
    }
    Ok(Vocabulary { k, dim, centroids, seed, inertia, inertia_history: history })
}
