use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{TrajectoryCache, VqLayer};
use crate::dit::{ddpm_sample, dit_block, weight_name, BlockVars, DitModel, Linear};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::vq::{Assignments, CandidateSet};

/// Block-output error of a model driven with cached FP block inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMse {
    /// Mean over all cached `(trajectory, t)` pairs, per block.
    pub per_block: Vec<f64>,
    /// Mean of `per_block`.
    pub mean: f64,
}

fn check_cache(model: &DitModel, cache: &TrajectoryCache) -> Result<()> {
    if cache.steps() != model.config.timesteps || cache.depth() != model.config.depth {
        return Err(Error::Config("trajectory cache does not match the model configuration".into()));
    }
    Ok(())
}

/// Runs every block of `model` on the cached FP inputs and compares with the cached FP outputs.
pub fn block_output_mse(model: &DitModel, cache: &TrajectoryCache) -> Result<BlockMse> {
    check_cache(model, cache)?;
    let depth = model.config.depth;
    let rows = cache
        .all_items()
        .par_iter()
        .map(|&(j, t)| {
            let step = cache.step(j, t);
            let mut tape = Tape::new();
            let c = tape.constant(step.c.clone());
            (0..depth)
                .map(|b| {
                    let vars = model.block_vars(&mut tape, b)?;
                    let x = tape.constant(step.blocks[b].0.clone());
                    let out = dit_block(&mut tape, x, c, &vars, model.config.heads)?;
                    tape.value(out).mse(&step.blocks[b].1)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_block = vec![0.0; depth];
    for row in &rows {
        per_block.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    per_block.iter_mut().for_each(|a| *a /= rows.len() as f64);
    let mean = per_block.iter().sum::<f64>() / depth as f64;
    Ok(BlockMse { per_block, mean })
}

/// Mean squared difference between `model`'s samples and the cached FP
/// samples, using the same labels and noise seeds. `cfg_scale` must be the
/// scale the cache was generated with.
pub fn final_latent_mse(model: &DitModel, cache: &TrajectoryCache, cfg_scale: f32) -> Result<f64> {
    check_cache(model, cache)?;
    let errs = cache
        .trajectories()
        .par_iter()
        .map(|tr| ddpm_sample(model, tr.y, cfg_scale, tr.seed)?.final_latent.mse(&tr.final_latent))
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Mean cosine similarity over all unordered pairs of `vectors`, computed as
/// `(|sum u|^2 - m) / (m (m - 1))` over unit vectors `u`. Zero vectors are
/// skipped; `None` if fewer than two remain.
pub fn mean_pairwise_cosine<'a>(vectors: impl IntoIterator<Item = &'a [f32]>) -> Option<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut m = 0usize;
    for v in vectors {
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        if sum.is_empty() {
            sum = vec![0.0; v.len()];
        }
        sum.iter_mut().zip(v).for_each(|(s, &x)| *s += x as f64 / norm);
        m += 1;
    }
    if m < 2 {
        return None;
    }
    let sq: f64 = sum.iter().map(|s| s * s).sum();
    Some(((sq - m as f64) / (m * (m - 1)) as f64).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodewordCosine {
    pub layer: String,
    pub codeword: u32,
    /// Sub-vectors with a non-zero gradient assigned to this codeword.
    pub members: usize,
    pub mean_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub codewords: Vec<CodewordCosine>,
    /// Mean of `mean_cosine` over reported codewords.
    pub mean: f64,
    /// Counts of per-codeword means in 20 equal bins over `[-1, 1]`.
    pub histogram: Vec<u64>,
}

pub const COSINE_BINS: usize = 20;

/// Groups the block-output loss gradient with respect to each reconstructed
/// sub-vector by its assignment and reports the mean pairwise cosine
/// similarity per codeword. Codebooks are read but never changed. The loss is
/// taken over `sample_size` cached `(trajectory, t)` pairs drawn with `seed`.
pub fn grad_cosine_report(
    model: &DitModel,
    layers: &[VqLayer],
    assignments: &[Assignments],
    cache: &TrajectoryCache,
    sample_size: usize,
    seed: u64,
) -> Result<CosineReport> {
    check_cache(model, cache)?;
    if layers.len() != assignments.len() {
        return Err(dim_err("one assignment vector per layer required"));
    }
    let all = cache.all_items();
    let take = sample_size.clamp(1, all.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, all.len(), take).into_vec();
    picks.sort_unstable();

    let mut tape = Tape::new();
    let mut wvars = std::collections::HashMap::new();
    for (l, a) in layers.iter().zip(assignments) {
        let cb = tape.constant(l.codebook.to_tensor());
        let flat = tape.gather_rows(cb, Arc::new(a.0.clone()))?;
        let flat = tape.reshape(flat, &[l.shape.o, l.shape.i])?;
        // the reconstruction itself is the leaf being differentiated
        let w = tape.param(tape.value(flat).clone());
        wvars.insert(l.name.clone(), w);
    }
    let depth = model.config.depth;
    let mut blocks = Vec::with_capacity(depth);
    for b in 0..depth {
        blocks.push(BlockVars::build(|name| {
            let w = *wvars
                .get(&weight_name(b, name))
                .ok_or_else(|| Error::Config(format!("no quantized layer for {}", weight_name(b, name))))?;
            let bias = model.param(&crate::dit::bias_name(b, name)).clone();
            Ok(Linear { w, b: tape.constant(bias) })
        })?);
    }
    let mut total = None;
    for &p in &picks {
        let (j, t) = all[p];
        let step = cache.step(j, t);
        let c = tape.constant(step.c.clone());
        for (b, vars) in blocks.iter().enumerate() {
            let x = tape.constant(step.blocks[b].0.clone());
            let out = dit_block(&mut tape, x, c, vars, model.config.heads)?;
            let target = tape.constant(step.blocks[b].1.clone());
            let e = tape.mse(out, target)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, e)?,
                None => e,
            });
        }
    }
    let total = total.expect("at least one sample");
    let loss = tape.scale(total, 1.0 / take as f32);
    tape.backward(loss)?;

    let mut codewords = Vec::new();
    for (l, a) in layers.iter().zip(assignments) {
        let grad = tape.grad(wvars[&l.name]).unwrap_or_else(|| Tensor::zeros(&[l.shape.o, l.shape.i]));
        let d = l.shape.d;
        let g = grad.data();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); l.shape.k];
        for (s, &c) in a.0.iter().enumerate() {
            groups[c as usize].push(s);
        }
        for (c, members) in groups.iter().enumerate() {
            let vecs: Vec<&[f32]> = members.iter().map(|&s| &g[s * d..(s + 1) * d]).collect();
            let nonzero = vecs.iter().filter(|v| v.iter().any(|&x| x != 0.0)).count();
            if let Some(mean_cosine) = mean_pairwise_cosine(vecs.iter().copied()) {
                codewords.push(CodewordCosine {
                    layer: l.name.clone(),
                    codeword: c as u32,
                    members: nonzero,
                    mean_cosine,
                });
            }
        }
    }
    if codewords.is_empty() {
        return Err(Error::Input("no codeword has two or more assigned sub-vectors".into()));
    }
    let mean = codewords.iter().map(|c| c.mean_cosine).sum::<f64>() / codewords.len() as f64;
    let mut histogram = vec![0u64; COSINE_BINS];
    for c in &codewords {
        let bin = (((c.mean_cosine + 1.0) / 2.0) * COSINE_BINS as f64).floor() as usize;
        histogram[bin.min(COSINE_BINS - 1)] += 1;
    }
    Ok(CosineReport { codewords, mean, histogram })
}

/// How often the finalized assignment sits at each candidate position
/// (position 0 is the nearest initial codeword).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub counts: Vec<u64>,
    pub proportions: Vec<f64>,
}

impl PositionReport {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let proportions = counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect();
        Self { counts, proportions }
    }

    /// Pools counts with another report over the same `n`.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.counts.len() != other.counts.len() {
            return Err(dim_err("position reports over different candidate lengths"));
        }
        Ok(Self::from_counts(self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect()))
    }
}

pub fn candidate_position_report(assignments: &Assignments, set: &CandidateSet) -> Result<PositionReport> {
    if assignments.len() != set.count() {
        return Err(dim_err(format!("{} assignments for {} candidate sets", assignments.len(), set.count())));
    }
    let mut counts = vec![0u64; set.n()];
    for (j, &a) in assignments.0.iter().enumerate() {
        let pos = set
            .row(j)
            .iter()
            .position(|&c| c == a)
            .ok_or_else(|| Error::Contract(format!("assignment {a} of sub-vector {j} is not a candidate")))?;
        counts[pos] += 1;
    }
    Ok(PositionReport::from_counts(counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(vs: &[&[f32]]) -> f64 {
        let mut s = 0.0;
        let mut pairs = 0;
        for a in 0..vs.len() {
            for b in a + 1..vs.len() {
                let dot: f64 = vs[a].iter().zip(vs[b]).map(|(&x, &y)| x as f64 * y as f64).sum();
                let na: f64 = vs[a].iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = vs[b].iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                s += dot / (na * nb);
                pairs += 1;
            }
        }
        s / pairs as f64
    }

    #[test]
    fn cosine_examples() {
        let a: &[f32] = &[1.0, 2.0];
        assert!((mean_pairwise_cosine([a, a]).unwrap() - 1.0).abs() < 1e-12);
        assert!((mean_pairwise_cosine([a, &[-1.0, -2.0][..]]).unwrap() + 1.0).abs() < 1e-12);
        assert!(mean_pairwise_cosine([&[1.0, 0.0][..], &[0.0, 3.0][..]]).unwrap().abs() < 1e-12);
        assert_eq!(mean_pairwise_cosine([a]), None);
        assert_eq!(mean_pairwise_cosine([a, &[0.0, 0.0][..]]), None);
    }

    #[test]
    fn cosine_matches_pairwise_sum() {
        let vs: Vec<Vec<f32>> = vec![
            vec![0.3, -1.2, 0.5, 2.0],
            vec![1.0, 0.1, -0.4, 0.7],
            vec![-0.2, 0.9, 0.9, -1.1],
            vec![0.05, 0.05, 1.5, 0.2],
            vec![2.0, -0.3, 0.0, 0.4],
        ];
        let refs: Vec<&[f32]> = vs.iter().map(|v| v.as_slice()).collect();
        assert!((mean_pairwise_cosine(refs.iter().copied()).unwrap() - brute(&refs)).abs() < 1e-12);
    }

    #[test]
    fn positions() {
        let set = CandidateSet::new(2, vec![3, 1, 0, 2, 2, 3], vec![0.0; 6]).unwrap();
        let r = candidate_position_report(&Assignments(vec![3, 2, 2]), &set).unwrap();
        assert_eq!(r.counts, vec![2, 1]);
        assert!((r.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(candidate_position_report(&Assignments(vec![0, 2, 2]), &set).is_err());

        let one = set.truncated(1).unwrap();
        let r = candidate_position_report(&one.nearest(), &one).unwrap();
        assert_eq!(r.proportions, vec![1.0]);
        assert_eq!(r.merge(&r).unwrap().counts, vec![6]);
    }
}
