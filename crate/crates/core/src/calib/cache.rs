use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dit::{ddpm_sample, DitModel, Trajectory, TrajectoryStep};
use crate::error::{Error, Result};
use crate::modelio::{FormatError, TensorContainer};

/// Floating-point sampling trajectories with every block's input and output
/// recorded at every timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCache {
    trajectories: Vec<Trajectory>,
    steps: usize,
    depth: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    steps: usize,
    depth: usize,
    /// `(label, noise seed)` per trajectory.
    samples: Vec<(usize, u64)>,
}

impl TrajectoryCache {
    /// `count` trajectories with labels drawn uniformly from the real classes.
    /// Labels and noise seeds come from `seed`; sampling runs in parallel.
    pub fn generate(model: &DitModel, count: usize, seed: u64, cfg_scale: f32) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("trajectory cache needs at least one trajectory".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<(usize, u64)> =
            (0..count).map(|_| (rng.random_range(1..=model.config.classes), rng.random::<u64>())).collect();
        let trajectories =
            samples.par_iter().map(|&(y, s)| ddpm_sample(model, y, cfg_scale, s)).collect::<Result<Vec<_>>>()?;
        Self::from_trajectories(trajectories, model.config.timesteps, model.config.depth)
    }

    pub fn from_trajectories(trajectories: Vec<Trajectory>, steps: usize, depth: usize) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Config("trajectory cache needs at least one trajectory".into()));
        }
        for tr in &trajectories {
            let ts: Vec<usize> = tr.steps.iter().map(|s| s.t).collect();
            let expected: Vec<usize> = (1..=steps).rev().collect();
            if ts != expected {
                return Err(Error::Input(format!("trajectory does not cover t = {steps}..1")));
            }
            if tr.steps.iter().any(|s| s.blocks.len() != depth) {
                return Err(Error::Input(format!("trajectory step without {depth} block records")));
            }
        }
        Ok(Self { trajectories, steps, depth })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Record of trajectory `traj` at timestep `t` in `[1, T]`.
    pub fn step(&self, traj: usize, t: usize) -> &TrajectoryStep {
        &self.trajectories[traj].steps[self.steps - t]
    }

    /// Every `(trajectory, t)` pair in a fixed order.
    pub fn all_items(&self) -> Vec<(usize, usize)> {
        (0..self.len()).flat_map(|j| (1..=self.steps).map(move |t| (j, t))).collect()
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        let meta = CacheMeta {
            steps: self.steps,
            depth: self.depth,
            samples: self.trajectories.iter().map(|t| (t.y, t.seed)).collect(),
        };
        c.metadata.insert("trajectory_cache".into(), serde_json::to_string(&meta).expect("serializable"));
        for (j, tr) in self.trajectories.iter().enumerate() {
            c.insert_f32(&format!("traj.{j}.final"), &tr.final_latent).expect("unique");
            for s in &tr.steps {
                let p = format!("traj.{j}.t{}", s.t);
                c.insert_f32(&format!("{p}.z"), &s.z_t).expect("unique");
                c.insert_f32(&format!("{p}.c"), &s.c).expect("unique");
                for (b, (x, y)) in s.blocks.iter().enumerate() {
                    c.insert_f32(&format!("{p}.b{b}.in"), x).expect("unique");
                    c.insert_f32(&format!("{p}.b{b}.out"), y).expect("unique");
                }
            }
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let raw = c
            .metadata
            .get("trajectory_cache")
            .ok_or_else(|| FormatError::MalformedHeader("missing trajectory_cache metadata".into()))?;
        let meta: CacheMeta = serde_json::from_str(raw)
            .map_err(|e| FormatError::MalformedHeader(format!("trajectory_cache metadata: {e}")))?;
        let mut trajectories = Vec::with_capacity(meta.samples.len());
        for (j, &(y, seed)) in meta.samples.iter().enumerate() {
            let mut steps = Vec::with_capacity(meta.steps);
            for t in (1..=meta.steps).rev() {
                let p = format!("traj.{j}.t{t}");
                let blocks = (0..meta.depth)
                    .map(|b| Ok((c.get(&format!("{p}.b{b}.in"))?, c.get(&format!("{p}.b{b}.out"))?)))
                    .collect::<std::result::Result<Vec<_>, FormatError>>()?;
                steps.push(TrajectoryStep { t, z_t: c.get(&format!("{p}.z"))?, c: c.get(&format!("{p}.c"))?, blocks });
            }
            trajectories.push(Trajectory { y, seed, steps, final_latent: c.get(&format!("traj.{j}.final"))? });
        }
        Self::from_trajectories(trajectories, meta.steps, meta.depth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::DiTConfig;
    use crate::modelio::parse_container;

    fn small() -> DitModel {
        let cfg =
            DiTConfig { depth: 2, hidden: 16, heads: 2, tokens: 4, classes: 3, timesteps: 4, ..Default::default() };
        DitModel::random(cfg, 5).unwrap()
    }

    #[test]
    fn block_inputs_chain_within_a_step() {
        let m = small();
        let cache = TrajectoryCache::generate(&m, 3, 1, 1.0).unwrap();
        assert_eq!(cache.len(), 3);
        for (j, t) in cache.all_items() {
            let s = cache.step(j, t);
            assert_eq!(s.t, t);
            assert_eq!(s.blocks[1].0, s.blocks[0].1);
            let fwd = m.forward(&s.z_t, t, cache.trajectories()[j].y).unwrap();
            assert_eq!(fwd.blocks, s.blocks);
        }
    }

    #[test]
    fn container_roundtrip() {
        let cache = TrajectoryCache::generate(&small(), 2, 9, 1.5).unwrap();
        let bytes = cache.to_container().to_bytes();
        let back = TrajectoryCache::from_container(&parse_container(&bytes).unwrap()).unwrap();
        assert_eq!(back, cache);
        assert_eq!(back.to_container().to_bytes(), bytes);
    }

    #[test]
    fn deterministic() {
        let m = small();
        assert_eq!(
            TrajectoryCache::generate(&m, 2, 4, 1.0).unwrap(),
            TrajectoryCache::generate(&m, 2, 4, 1.0).unwrap()
        );
        assert!(TrajectoryCache::generate(&m, 0, 4, 1.0).is_err());
    }
}
