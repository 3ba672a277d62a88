//! Zero-data, block-wise calibration of vector-quantized DiT layers.
//!
//! Each quantized block is driven with the floating-point model's own block
//! inputs, recorded along its sampling trajectories, so errors never compound
//! across blocks or timesteps. Codebooks and candidate logits are tuned with
//! RMSprop against a block-output reconstruction loss plus a term that pushes
//! every candidate mixture towards one-hot.

mod artifacts;
mod cache;
mod diagnostics;
mod engine;

pub use artifacts::{candidate_sidecar, layers_from_artifacts, layers_from_quantized, to_quantized_model};
pub use cache::TrajectoryCache;
pub use diagnostics::{
    block_output_mse, candidate_position_report, final_latent_mse, grad_cosine_report, mean_pairwise_cosine, BlockMse,
    CodewordCosine, CosineReport, PositionReport, COSINE_BINS,
};
pub use engine::{calibrate, CalibOutcome, GradCheck, IterRecord};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dit::DitModel;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;
use crate::vq::{
    build_candidates, finalize, kmeans, reconstruct_hard, reconstruct_soft, split_subvectors, Assignments,
    CandidateSet, Codebook, KMeansParams, LayerShape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibMode {
    /// Codebooks and candidate logits.
    Full,
    /// Nearest-codeword assignments fixed; codebooks only.
    CodebookOnly,
    /// Codebooks fixed; candidate logits only.
    AssignmentOnly,
    /// No updates; every sub-vector takes its nearest candidate.
    None,
}

impl std::str::FromStr for CalibMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "codebook_only" | "codebook-only" => Ok(Self::CodebookOnly),
            "assignment_only" | "assignment-only" => Ok(Self::AssignmentOnly),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown calibration mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    /// Weight of the block-output loss.
    pub lambda_d: f32,
    /// Weight of the ratio-sharpening loss.
    pub lambda_r: f32,
    /// A layer freezes once its ratio loss falls below this.
    pub lambda_freeze: f32,
    pub lr_ratio: f32,
    /// Also used for biases when `tune_biases` is set.
    pub lr_codebook: f32,
    /// Trajectories per update step.
    pub batch: usize,
    pub iters: usize,
    /// Candidate-set length.
    pub n: usize,
    pub mode: CalibMode,
    pub tune_biases: bool,
    pub seed: u64,
    /// Run a finite-difference probe every this many iterations (0 disables).
    pub grad_check_every: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_r: 1.0,
            lambda_freeze: 1e-4,
            lr_ratio: 5e-2,
            lr_codebook: 1e-4,
            batch: 16,
            iters: 500,
            n: 2,
            mode: CalibMode::Full,
            tune_biases: false,
            seed: 0,
            grad_check_every: 0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f32| v.is_finite() && v >= 0.0;
        let positive = |v: f32| v.is_finite() && v > 0.0;
        if !finite_nonneg(self.lambda_d) || !finite_nonneg(self.lambda_r) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !finite_nonneg(self.lambda_freeze) {
            return Err(Error::Config("freeze threshold must be finite and non-negative".into()));
        }
        if !positive(self.lr_ratio) || !positive(self.lr_codebook) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("candidate length n must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-layer codebook shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub d: usize,
    pub k: usize,
}

impl QuantPlan {
    /// `2` gives `k = 256, d = 4`; `3` gives `k = 64, d = 2`.
    pub fn preset(bits: u32) -> Result<Self> {
        match bits {
            2 => Ok(Self { d: 4, k: 256 }),
            3 => Ok(Self { d: 2, k: 64 }),
            b => Err(Error::Config(format!("no preset for {b}-bit quantization"))),
        }
    }

    pub fn effective_bits(&self) -> f64 {
        (self.k as f64).log2() / self.d as f64
    }
}

/// Calibration state of one quantized linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VqLayer {
    /// Weight parameter name in the FP model.
    pub name: String,
    pub shape: LayerShape,
    pub codebook: Codebook,
    pub candidates: CandidateSet,
    /// Set when the layer freezes; never changes afterwards.
    pub assignments: Option<Assignments>,
}

impl VqLayer {
    /// k-means codebook plus the `n` nearest candidates of every sub-vector.
    pub fn init(name: &str, w: &Tensor, plan: QuantPlan, n: usize, params: &KMeansParams) -> Result<Self> {
        let (o, i) = w.dims2()?;
        let shape = LayerShape::new(o, i, plan.d, plan.k)?;
        let sv = split_subvectors(w, plan.d)?;
        let km = kmeans(&sv, plan.k, params)?;
        let candidates = build_candidates(&sv, &km.codebook, n)?;
        Ok(Self { name: name.to_string(), shape, codebook: km.codebook, candidates, assignments: None })
    }

    pub fn is_frozen(&self) -> bool {
        self.assignments.is_some()
    }

    /// Commits every sub-vector to its highest-ratio candidate. No-op once frozen.
    pub fn freeze(&mut self) {
        if self.assignments.is_none() {
            self.assignments = Some(finalize(&self.candidates));
            self.candidates.frozen = true;
        }
    }

    /// Frozen assignments, or the current argmax.
    pub fn current_assignments(&self) -> Assignments {
        self.assignments.clone().unwrap_or_else(|| finalize(&self.candidates))
    }

    /// Ratio loss of this layer alone: mean over its sub-vectors.
    pub fn ratio_loss(&self) -> f64 {
        loss_lr(&self.candidates.ratios(), self.candidates.n())
    }

    /// Soft reconstruction while unfrozen, hard afterwards.
    pub fn weight(&self) -> Result<Tensor> {
        let LayerShape { o, i, .. } = self.shape;
        match &self.assignments {
            Some(a) => reconstruct_hard(&self.codebook, a, o, i),
            None => reconstruct_soft(&self.codebook, &self.candidates, o, i),
        }
    }

    /// Hard reconstruction from the current argmax assignments.
    pub fn hard_weight(&self) -> Result<Tensor> {
        reconstruct_hard(&self.codebook, &self.current_assignments(), self.shape.o, self.shape.i)
    }
}

/// Quantizes every block linear of `model`. Layer `j` uses k-means seed `params.seed + j`.
pub fn init_layers(model: &DitModel, plan: QuantPlan, n: usize, params: &KMeansParams) -> Result<Vec<VqLayer>> {
    init_layers_with(model, |_| plan, n, params)
}

/// [`init_layers`] with a per-layer plan.
pub fn init_layers_with(
    model: &DitModel,
    plan: impl Fn(&str) -> QuantPlan,
    n: usize,
    params: &KMeansParams,
) -> Result<Vec<VqLayer>> {
    model
        .quantizable_layers()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let p = KMeansParams { seed: params.seed.wrapping_add(j as u64), ..*params };
            VqLayer::init(name, model.param(name), plan(name), n, &p).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{name}: {m}")),
                Error::Dimension(m) => Error::Dimension(format!("{name}: {m}")),
                other => other,
            })
        })
        .collect()
}

/// Hard-reconstructed weights of every layer, keyed by parameter name.
pub fn hard_weights(layers: &[VqLayer]) -> Result<BTreeMap<String, Tensor>> {
    layers.iter().map(|l| Ok((l.name.clone(), l.hard_weight()?))).collect()
}

/// Block-output loss of one sample: per-block mean squared error, summed over blocks.
/// A batch loss is the mean of this over the batch.
pub fn loss_ld(fp_outputs: &[Tensor], q_outputs: &[Tensor]) -> Result<f64> {
    if fp_outputs.len() != q_outputs.len() {
        return Err(dim_err(format!("{} reference blocks vs {} quantized blocks", fp_outputs.len(), q_outputs.len())));
    }
    fp_outputs.iter().zip(q_outputs).map(|(a, b)| a.mse(b)).sum()
}

/// Ratio loss: `sum (1 - |2r - 1|)` over every sub-vector and candidate,
/// divided by the number of sub-vectors. `ratios` is `count x n`.
pub fn loss_lr(ratios: &[f32], n: usize) -> f64 {
    let count = ratios.len() / n.max(1);
    if count == 0 {
        return 0.0;
    }
    let total: f64 = ratios.iter().map(|&r| 1.0 - (2.0 * r as f64 - 1.0).abs()).sum();
    total / count as f64
}

/// RMSprop over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Rmsprop {
    pub lr: f32,
    pub decay: f64,
    pub eps: f64,
    /// Running mean of squared gradients.
    mean_sq: Vec<f64>,
}

impl Rmsprop {
    pub fn new(len: usize, lr: f32) -> Self {
        Self { lr, decay: 0.99, eps: 1e-8, mean_sq: vec![0.0; len] }
    }

    pub fn mean_sq(&self) -> &[f64] {
        &self.mean_sq
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<()> {
        if params.len() != self.mean_sq.len() || grads.len() != params.len() {
            return Err(dim_err(format!(
                "optimizer over {} values given {} params and {} grads",
                self.mean_sq.len(),
                params.len(),
                grads.len()
            )));
        }
        let lr = self.lr as f64;
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.mean_sq) {
            let g = g as f64;
            *v = self.decay * *v + (1.0 - self.decay) * g * g;
            *p = (*p as f64 - lr * g / (v.sqrt() + self.eps)) as f32;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ld_examples() {
        let fp = [Tensor::from_rows(&[&[1.0, 2.0]])];
        let q = [Tensor::from_rows(&[&[1.0, 3.0]])];
        assert_eq!(loss_ld(&fp, &q).unwrap(), 0.5);
        assert_eq!(loss_ld(&fp, &fp).unwrap(), 0.0);
        assert!(loss_ld(&fp, &[]).is_err());
    }

    #[test]
    fn lr_examples() {
        assert!((loss_lr(&[0.5; 10], 2) - 2.0).abs() < 1e-12);
        assert_eq!(loss_lr(&[1.0, 0.0, 0.0, 1.0], 2), 0.0);
        assert!((loss_lr(&[0.9, 0.1], 2) - 0.4).abs() < 1e-6);
    }

    #[test]
    fn rmsprop_first_step() {
        let mut opt = Rmsprop::new(2, 0.1);
        let mut p = [1.0f32, 1.0];
        opt.step(&mut p, &[2.0, 0.0]).unwrap();
        // v = 0.01 * 4, step = 0.1 * 2 / 0.2
        assert!((p[0] - 0.0).abs() < 1e-6);
        assert_eq!(p[1], 1.0);
        assert!((opt.mean_sq()[0] - 0.04).abs() < 1e-12);
    }

    #[test]
    fn presets() {
        assert_eq!(QuantPlan::preset(2).unwrap(), QuantPlan { d: 4, k: 256 });
        assert_eq!(QuantPlan::preset(3).unwrap(), QuantPlan { d: 2, k: 64 });
        assert_eq!(QuantPlan::preset(2).unwrap().effective_bits(), 2.0);
        assert_eq!(QuantPlan::preset(3).unwrap().effective_bits(), 3.0);
        assert!(QuantPlan::preset(4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CalibConfig::default().validate().is_ok());
        for bad in [
            CalibConfig { lambda_r: -1.0, ..Default::default() },
            CalibConfig { lr_ratio: 0.0, ..Default::default() },
            CalibConfig { n: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        assert_eq!("codebook_only".parse::<CalibMode>().unwrap(), CalibMode::CodebookOnly);
        assert!("bogus".parse::<CalibMode>().is_err());
    }
}
