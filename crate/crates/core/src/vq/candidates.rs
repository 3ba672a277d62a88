use rayon::prelude::*;

use super::{squared_distance, Assignments, Codebook, SubVectors};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Per sub-vector, the `n` nearest codewords and the logits of their mixing ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    n: usize,
    /// `count x n` codeword indices, ascending initial distance.
    candidates: Vec<u32>,
    /// `count x n` logits; ratios are their per-row softmax.
    pub logits: Vec<f32>,
    pub frozen: bool,
}

impl CandidateSet {
    pub fn new(n: usize, candidates: Vec<u32>, logits: Vec<f32>) -> Result<Self> {
        if n == 0 || !candidates.len().is_multiple_of(n) || candidates.len() != logits.len() {
            return Err(dim_err(format!(
                "candidate set with n={n}, {} indices, {} logits",
                candidates.len(),
                logits.len()
            )));
        }
        for row in candidates.chunks_exact(n) {
            for (p, c) in row.iter().enumerate() {
                if row[..p].contains(c) {
                    return Err(Error::Config(format!("duplicate candidate {c} in one set")));
                }
            }
        }
        Ok(Self { n, candidates, logits, frozen: false })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn count(&self) -> usize {
        self.candidates.len() / self.n
    }

    pub fn candidates(&self) -> &[u32] {
        &self.candidates
    }

    pub fn row(&self, j: usize) -> &[u32] {
        &self.candidates[j * self.n..(j + 1) * self.n]
    }

    /// Per-row softmax of the logits, `count x n`.
    pub fn ratios(&self) -> Vec<f32> {
        let mut t = crate::tensor::Tape::new();
        let v = t.constant(self.logits_tensor());
        let r = t.softmax(v);
        t.value(r).data().to_vec()
    }

    pub fn logits_tensor(&self) -> Tensor {
        Tensor::new(vec![self.count(), self.n], self.logits.clone()).expect("consistent candidate set")
    }

    /// The nearest-codeword assignment (position 0 of every set).
    pub fn nearest(&self) -> Assignments {
        Assignments(self.candidates.chunks_exact(self.n).map(|r| r[0]).collect())
    }

    /// Keeps only the first `n` candidates of every set, resetting logits to zero.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n {
            return Err(Error::Config(format!("cannot truncate n={} to {n}", self.n)));
        }
        let candidates: Vec<u32> = self.candidates.chunks_exact(self.n).flat_map(|r| r[..n].iter().copied()).collect();
        let len = candidates.len();
        Self::new(n, candidates, vec![0.0; len])
    }
}

/// The `n` nearest codewords of every sub-vector, ties broken by lowest index.
/// Logits start at zero so every ratio is `1/n`.
pub fn build_candidates(sv: &SubVectors, cb: &Codebook, n: usize) -> Result<CandidateSet> {
    if n == 0 || n > cb.k() {
        return Err(Error::Config(format!("candidate length {n} must lie in [1, {}]", cb.k())));
    }
    if sv.d() != cb.d() {
        return Err(dim_err(format!("sub-vector length {} vs codeword length {}", sv.d(), cb.d())));
    }
    let rows: Vec<Vec<u32>> = (0..sv.count())
        .into_par_iter()
        .map(|j| {
            let w = sv.get(j);
            let mut dists: Vec<(f64, u32)> = (0..cb.k()).map(|c| (squared_distance(w, cb.word(c)), c as u32)).collect();
            let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if n < dists.len() {
                dists.select_nth_unstable_by(n - 1, cmp);
                dists.truncate(n);
            }
            dists.sort_by(cmp);
            dists.into_iter().map(|(_, c)| c).collect()
        })
        .collect();
    let candidates: Vec<u32> = rows.into_iter().flatten().collect();
    let len = candidates.len();
    CandidateSet::new(n, candidates, vec![0.0; len])
}

/// Per sub-vector, the candidate with the largest ratio; ties go to the earliest position.
pub fn finalize(set: &CandidateSet) -> Assignments {
    let ratios = set.ratios();
    let n = set.n();
    Assignments(
        ratios
            .chunks_exact(n)
            .zip(set.candidates().chunks_exact(n))
            .map(|(r, c)| {
                let mut best = 0;
                for p in 1..n {
                    if r[p] > r[best] {
                        best = p;
                    }
                }
                c[best]
            })
            .collect(),
    )
}

/// Weighted reconstruction with explicit ratios (`count x n`).
pub fn reconstruct_weighted(cb: &Codebook, set: &CandidateSet, ratios: &[f32], o: usize, i: usize) -> Result<Tensor> {
    let n = set.n();
    if ratios.len() != set.candidates().len() || o * i != set.count() * cb.d() {
        return Err(dim_err(format!("{} sub-vectors of length {} cannot fill {o}x{i}", set.count(), cb.d())));
    }
    let d = cb.d();
    let mut data = Vec::with_capacity(o * i);
    let mut acc = vec![0.0f64; d];
    for (c, r) in set.candidates().chunks_exact(n).zip(ratios.chunks_exact(n)) {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (&idx, &ratio) in c.iter().zip(r) {
            if idx as usize >= cb.k() {
                return Err(dim_err(format!("candidate {idx} out of {}", cb.k())));
            }
            for (a, &w) in acc.iter_mut().zip(cb.word(idx as usize)) {
                *a += ratio as f64 * w as f64;
            }
        }
        data.extend(acc.iter().map(|&a| a as f32));
    }
    Tensor::new(vec![o, i], data)
}

/// `sum_j ratio_j * c(candidate_j)` for every sub-vector, ratios from the set's logits.
pub fn reconstruct_soft(cb: &Codebook, set: &CandidateSet, o: usize, i: usize) -> Result<Tensor> {
    reconstruct_weighted(cb, set, &set.ratios(), o, i)
}
