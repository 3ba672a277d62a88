//! Lloyd's k-means with k-means++ seeding.
//!
//! The objective `sum ||w - c(a)||^2` is evaluated in `f64` and is
//! non-increasing across iterations: assignment is an exact argmin (ties to the
//! lowest index) and a centroid update is only accepted when it does not raise
//! its cluster's error, so `f32` rounding of the mean cannot push the objective
//! up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{squared_distance, Assignments, Codebook, SubVectors};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative objective decrease falls below this.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { seed: 0, max_iters: 100, tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub codebook: Codebook,
    pub assignments: Assignments,
    /// Objective of the returned codebook/assignments.
    pub objective: f64,
    /// Objective after the initial assignment and after every Lloyd iteration.
    pub history: Vec<f64>,
}

pub fn kmeans(sv: &SubVectors, k: usize, params: &KMeansParams) -> Result<KMeansResult> {
    let count = sv.count();
    if k == 0 || count < k {
        return Err(Error::Config(format!("k-means needs at least k={k} sub-vectors, got {count}")));
    }
    let d = sv.d();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = seed_plus_plus(sv, k, &mut rng);

    let (mut assign, mut dist) = assign_with_reseed(sv, &mut centroids, k);
    let mut objective: f64 = dist.iter().sum();
    let mut history = vec![objective];

    for _ in 0..params.max_iters {
        if objective == 0.0 {
            break;
        }
        update_centroids(sv, &assign, &mut centroids, k);
        let (a, dd) = assign_with_reseed(sv, &mut centroids, k);
        let next: f64 = dd.iter().sum();
        assign = a;
        dist = dd;
        let prev = objective;
        objective = next;
        history.push(objective);
        if prev == 0.0 || (prev - objective) / prev < params.tol {
            break;
        }
    }
    debug_assert_eq!(dist.len(), count);

    Ok(KMeansResult { codebook: Codebook::new(k, d, centroids)?, assignments: Assignments(assign), objective, history })
}

fn seed_plus_plus(sv: &SubVectors, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let count = sv.count();
    let d = sv.d();
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..count);
    centroids.extend_from_slice(sv.get(first));
    let mut best: Vec<f64> = sv.iter().map(|w| squared_distance(w, sv.get(first))).collect();

    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut chosen = None;
            for (j, &b) in best.iter().enumerate() {
                cum += b;
                if b > 0.0 && cum > target {
                    chosen = Some(j);
                    break;
                }
            }
            // Rounding can leave `cum` just short of `target`; fall back to the
            // last point with positive weight.
            chosen.unwrap_or_else(|| best.iter().rposition(|&b| b > 0.0).expect("total > 0"))
        } else {
            // Every point already coincides with a centroid.
            0
        };
        centroids.extend_from_slice(sv.get(pick));
        let new = &centroids[c * d..(c + 1) * d];
        best.par_iter_mut().enumerate().for_each(|(j, b)| {
            let dist = squared_distance(sv.get(j), new);
            if dist < *b {
                *b = dist;
            }
        });
    }
    centroids
}

fn nearest(w: &[f32], centroids: &[f32], d: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (c, word) in centroids.chunks_exact(d).enumerate() {
        let dist = squared_distance(w, word);
        if dist < best.1 {
            best = (c as u32, dist);
        }
    }
    best
}

fn assign_all(sv: &SubVectors, centroids: &[f32]) -> (Vec<u32>, Vec<f64>) {
    let d = sv.d();
    let pairs: Vec<(u32, f64)> = (0..sv.count()).into_par_iter().map(|j| nearest(sv.get(j), centroids, d)).collect();
    pairs.into_iter().unzip()
}

/// Assigns every point; empty clusters are moved onto the worst-served points
/// and the assignment is redone so it stays an exact argmin.
fn assign_with_reseed(sv: &SubVectors, centroids: &mut [f32], k: usize) -> (Vec<u32>, Vec<f64>) {
    let d = sv.d();
    let (assign, dist) = assign_all(sv, centroids);
    let mut sizes = vec![0usize; k];
    for &a in &assign {
        sizes[a as usize] += 1;
    }
    let empty: Vec<usize> = (0..k).filter(|&c| sizes[c] == 0).collect();
    if empty.is_empty() {
        return (assign, dist);
    }
    let mut order: Vec<usize> = (0..dist.len()).filter(|&j| dist[j] > 0.0).collect();
    if order.is_empty() {
        return (assign, dist);
    }
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    for (&c, &j) in empty.iter().zip(&order) {
        centroids[c * d..(c + 1) * d].copy_from_slice(sv.get(j));
    }
    assign_all(sv, centroids)
}

fn update_centroids(sv: &SubVectors, assign: &[u32], centroids: &mut [f32], k: usize) {
    let d = sv.d();
    let mut sums = vec![0.0f64; k * d];
    let mut sizes = vec![0usize; k];
    for (w, &a) in sv.iter().zip(assign) {
        let a = a as usize;
        sizes[a] += 1;
        for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(w) {
            *s += v as f64;
        }
    }
    let mut proposed = vec![0.0f32; k * d];
    for (c, (dst, src)) in proposed.chunks_exact_mut(d).zip(sums.chunks_exact(d)).enumerate() {
        let n = sizes[c].max(1) as f64;
        for (p, &s) in dst.iter_mut().zip(src) {
            *p = (s / n) as f32;
        }
    }

    let mut old_err = vec![0.0f64; k];
    let mut new_err = vec![0.0f64; k];
    for (w, &a) in sv.iter().zip(assign) {
        let a = a as usize;
        old_err[a] += squared_distance(w, &centroids[a * d..(a + 1) * d]);
        new_err[a] += squared_distance(w, &proposed[a * d..(a + 1) * d]);
    }
    for c in 0..k {
        if sizes[c] > 0 && new_err[c] <= old_err[c] {
            centroids[c * d..(c + 1) * d].copy_from_slice(&proposed[c * d..(c + 1) * d]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vq::reconstruction_sse;

    fn sv(points: &[[f32; 2]]) -> SubVectors {
        SubVectors::from_flat(2, points.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn two_distinct_values_are_lossless() {
        let data = sv(&[[0.0, 0.0], [0.0, 0.0], [2.0, 2.0], [2.0, 2.0]]);
        let r = kmeans(&data, 2, &KMeansParams::default()).unwrap();
        assert_eq!(r.objective, 0.0);
        let mut words: Vec<&[f32]> = (0..2).map(|c| r.codebook.word(c)).collect();
        words.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(words, vec![&[0.0, 0.0][..], &[2.0, 2.0][..]]);
    }

    #[test]
    fn single_cluster_is_the_centroid() {
        let data = sv(&[[0.0, 0.0], [0.0, 2.0], [2.0, 0.0], [2.0, 2.0]]);
        let r = kmeans(&data, 1, &KMeansParams::default()).unwrap();
        assert_eq!(r.codebook.word(0), &[1.0, 1.0]);
        assert_eq!(r.objective, 8.0);
    }

    #[test]
    fn too_few_points_is_a_config_error() {
        let data = sv(&[[0.0, 0.0]]);
        assert!(matches!(kmeans(&data, 2, &KMeansParams::default()), Err(Error::Config(_))));
    }

    #[test]
    fn objective_matches_returned_state() {
        let points: Vec<[f32; 2]> = (0..200)
            .map(|j| {
                let x = ((j * 37) % 101) as f32 / 10.0;
                let y = ((j * 53) % 89) as f32 / 7.0;
                [x, y]
            })
            .collect();
        let data = sv(&points);
        let r = kmeans(&data, 8, &KMeansParams { seed: 3, ..Default::default() }).unwrap();
        let sse = reconstruction_sse(&data, &r.codebook, &r.assignments);
        assert!((sse - r.objective).abs() <= 1e-12 * sse.max(1.0));
        for pair in r.history.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }
}
