//! Lloyd's k-means with k-means++ seeding over row-major `f32` data.
//!
//! Shared by the IVF coarse quantizer, the PQ sub-quantizers and
//! target-aware k-means pruning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::index::squared_l2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 25,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    /// Nearest centroid of every input row (ties go to the lower index).
    pub assignments: Vec<u32>,
    pub iterations: usize,
    /// Whether the assignment reached a fixpoint before `max_iters`.
    pub converged: bool,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a as usize] += 1;
        }
        sizes
    }
}

/// Index of the nearest row of `centroids`, ties to the lower index.
#[inline]
pub fn nearest(centroids: &[f32], dim: usize, v: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (c, row) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2(row, v);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Nearest centroid for every row of `data`.
pub fn assign(data: &[f32], dim: usize, centroids: &[f32]) -> Vec<u32> {
    data.par_chunks_exact(dim)
        .map(|v| nearest(centroids, dim, v).0 as u32)
        .collect()
}

fn plus_plus_init(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = row(first).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| squared_l2(row(i), row(first)) as f64).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // Rounding can walk off the end; take the last positive entry.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Every point coincides with a centroid already; take an unused row.
            let unused: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            if unused.is_empty() {
                rng.random_range(0..n)
            } else {
                unused[rng.random_range(0..unused.len())]
            }
        };
        chosen[pick] = true;
        let c = row(pick).to_vec();
        for (i, w) in d2.iter_mut().enumerate() {
            let d = squared_l2(row(i), &c) as f64;
            if d < *w {
                *w = d;
            }
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn update(data: &[f32], dim: usize, k: usize, assignments: &mut [u32], centroids: &mut [f32]) {
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (v, &a) in data.chunks_exact(dim).zip(assignments.iter()) {
        let a = a as usize;
        counts[a] += 1;
        for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(v) {
            *s += x as f64;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..dim {
                centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
            }
        }
    }
    // Re-seed empty clusters from the farthest member of the largest cluster.
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        if counts[largest] < 2 {
            break;
        }
        let mut far = (usize::MAX, -1f32);
        for (i, v) in data.chunks_exact(dim).enumerate() {
            if assignments[i] as usize == largest {
                let d = squared_l2(v, &centroids[largest * dim..(largest + 1) * dim]);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        let i = far.0;
        let point = data[i * dim..(i + 1) * dim].to_vec();
        centroids[c * dim..(c + 1) * dim].copy_from_slice(&point);
        assignments[i] = c as u32;
        counts[largest] -= 1;
        counts[c] = 1;
    }
}

/// Cluster the rows of `data` into `params.k` groups.
pub fn kmeans(data: &[f32], dim: usize, params: &KMeansParams) -> Result<KMeansResult> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return invalid("k-means data length is not a multiple of the dimension");
    }
    let n = data.len() / dim;
    if params.k == 0 {
        return invalid("k-means needs k >= 1");
    }
    if params.k > n {
        return invalid(format!("k-means with k = {} > {n} points", params.k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = plus_plus_init(data, dim, params.k, &mut rng);
    let mut assignments = assign(data, dim, &centroids);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iters {
        update(data, dim, params.k, &mut assignments, &mut centroids);
        iterations += 1;
        let next = assign(data, dim, &centroids);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }
    if !converged {
        assignments = assign(data, dim, &centroids);
    }
    Ok(KMeansResult {
        dim,
        centroids,
        assignments,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64) -> (Vec<f32>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 0.3).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let label = (i % 2) as u32;
            let c = if label == 0 { -5.0 } else { 5.0 };
            for _ in 0..3 {
                data.push(c + noise.sample(&mut rng));
            }
            labels.push(label);
        }
        (data, labels)
    }

    #[test]
    fn separates_two_blobs() {
        let (data, labels) = blobs(1);
        let r = kmeans(&data, 3, &KMeansParams::new(2, 7)).unwrap();
        assert!(r.converged);
        let flip = r.assignments[0] != labels[0];
        for (a, l) in r.assignments.iter().zip(&labels) {
            assert_eq!(*a, if flip { 1 - l } else { *l });
        }
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let data: Vec<f32> = (0..12).map(|i| (i * i) as f32).collect();
        let r = kmeans(&data, 2, &KMeansParams::new(6, 0)).unwrap();
        let mut sizes = r.cluster_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![1; 6]);
        for (i, v) in data.chunks_exact(2).enumerate() {
            assert_eq!(squared_l2(v, r.centroid(r.assignments[i] as usize)), 0.0);
        }
    }

    #[test]
    fn single_cluster_is_mean() {
        let data = [0.0f32, 2.0, 4.0, 6.0];
        let r = kmeans(&data, 1, &KMeansParams::new(1, 0)).unwrap();
        assert_eq!(r.centroids, vec![3.0]);
        assert_eq!(r.assignments, vec![0; 4]);
    }

    #[test]
    fn identical_points() {
        let data = vec![1.5f32; 40];
        let r = kmeans(&data, 2, &KMeansParams::new(3, 0)).unwrap();
        assert_eq!(r.assignments.len(), 20);
        assert_eq!(r.cluster_sizes().iter().sum::<usize>(), 20);
    }

    #[test]
    fn deterministic_and_argmin() {
        let (data, _) = blobs(4);
        let a = kmeans(&data, 3, &KMeansParams::new(5, 11)).unwrap();
        let b = kmeans(&data, 3, &KMeansParams::new(5, 11)).unwrap();
        assert_eq!(a, b);
        for (v, &c) in data.chunks_exact(3).zip(&a.assignments) {
            assert_eq!(nearest(&a.centroids, 3, v).0, c as usize);
        }
    }

    #[test]
    fn rejects_bad_k() {
        assert!(kmeans(&[1.0, 2.0], 1, &KMeansParams::new(3, 0)).is_err());
        assert!(kmeans(&[1.0, 2.0], 1, &KMeansParams::new(0, 0)).is_err());
    }
}
