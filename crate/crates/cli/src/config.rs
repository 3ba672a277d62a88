//! Run configuration: a TOML document whose fields command-line flags override.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;
use vqcal_core::calib::{CalibConfig, CalibMode, QuantPlan};
use vqcal_core::dit::DiTConfig;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: Option<PathBuf>,
    pub quantized: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub dit: DitOverrides,
    pub plan: PlanConfig,
    pub calib: CalibConfig,
    pub cache: CacheConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::input(format!("config {}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// DiT fields as optional overrides.
#[derive(Debug, Clone, Default, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct DitOverrides {
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f32>,
    #[arg(long)]
    pub clip_denoised: Option<f32>,
}

impl DitOverrides {
    /// Fields set in `other` win.
    pub fn merged(&self, other: &Self) -> Self {
        Self {
            depth: other.depth.or(self.depth),
            hidden: other.hidden.or(self.hidden),
            heads: other.heads.or(self.heads),
            tokens: other.tokens.or(self.tokens),
            classes: other.classes.or(self.classes),
            timesteps: other.timesteps.or(self.timesteps),
            cfg_scale: other.cfg_scale.or(self.cfg_scale),
            clip_denoised: other.clip_denoised.or(self.clip_denoised),
        }
    }

    pub fn apply(&self, base: &DiTConfig) -> DiTConfig {
        DiTConfig {
            depth: self.depth.unwrap_or(base.depth),
            hidden: self.hidden.unwrap_or(base.hidden),
            heads: self.heads.unwrap_or(base.heads),
            tokens: self.tokens.unwrap_or(base.tokens),
            classes: self.classes.unwrap_or(base.classes),
            timesteps: self.timesteps.unwrap_or(base.timesteps),
            cfg_scale: self.cfg_scale.unwrap_or(base.cfg_scale),
            clip_denoised: self.clip_denoised.unwrap_or(base.clip_denoised),
        }
    }

    /// Applies sampling-time fields to a loaded model's configuration. Structural
    /// fields may only restate the stored value.
    pub fn apply_to_loaded(&self, base: &DiTConfig) -> Result<DiTConfig, CliError> {
        let structural = [
            ("depth", self.depth, base.depth),
            ("hidden", self.hidden, base.hidden),
            ("heads", self.heads, base.heads),
            ("tokens", self.tokens, base.tokens),
            ("classes", self.classes, base.classes),
            ("timesteps", self.timesteps, base.timesteps),
        ];
        for (name, want, have) in structural {
            if let Some(w) = want.filter(|&w| w != have) {
                return Err(CliError::input(format!("{name}={w} conflicts with the model's {name}={have}")));
            }
        }
        Ok(self.apply(base))
    }
}

/// Codebook plan: a global bit-width or explicit `(k, d)`, with per-layer exceptions.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub bits: Option<u32>,
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub kmeans_iters: usize,
    pub layers: BTreeMap<String, QuantPlan>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { bits: None, k: None, d: None, kmeans_iters: 100, layers: BTreeMap::new() }
    }
}

impl PlanConfig {
    /// The plan for layers without an exception.
    pub fn global(&self) -> Result<QuantPlan, CliError> {
        match (self.bits, self.k, self.d) {
            (None, None, None) => Ok(QuantPlan::preset(2).expect("preset")),
            (Some(b), None, None) => QuantPlan::preset(b).map_err(CliError::from),
            (Some(b), None, Some(d)) => {
                let total = b as usize * d;
                if total == 0 || total > 16 {
                    return Err(CliError::input(format!(
                        "{b} bits x d={d} does not give a codebook size in [2, 65536]"
                    )));
                }
                Ok(QuantPlan { d, k: 1 << total })
            }
            (None, Some(k), Some(d)) => Ok(QuantPlan { d, k }),
            (Some(b), Some(k), Some(d)) if QuantPlan { d, k }.effective_bits() == b as f64 => Ok(QuantPlan { d, k }),
            _ => Err(CliError::input(
                "plan needs one of: bits; bits and d; k and d (bits, k and d must agree)".to_string(),
            )),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    /// Calibration trajectories sampled from the floating-point model.
    pub trajectories: usize,
    pub seed: u64,
    /// Guidance used while sampling calibration trajectories.
    pub cfg_scale: f32,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self { trajectories: 32, seed: 1, cfg_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trajectories: usize,
    pub seed: u64,
    pub uq_bits: Vec<u32>,
    /// Cached `(trajectory, t)` pairs used by the gradient-cosine diagnostic.
    pub cosine_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { trajectories: 16, seed: 2, uq_bits: Vec::new(), cosine_samples: 64 }
    }
}

/// Calibration fields as optional overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct CalibOverrides {
    #[arg(long)]
    pub lambda_d: Option<f32>,
    #[arg(long)]
    pub lambda_r: Option<f32>,
    #[arg(long)]
    pub lambda_freeze: Option<f32>,
    #[arg(long)]
    pub lr_ratio: Option<f32>,
    #[arg(long)]
    pub lr_codebook: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Candidate assignments per sub-vector.
    #[arg(long)]
    pub n: Option<usize>,
    /// full, codebook_only, assignment_only or none.
    #[arg(long)]
    pub mode: Option<CalibMode>,
    #[arg(long)]
    pub tune_biases: Option<bool>,
    #[arg(long)]
    pub grad_check_every: Option<usize>,
}

impl CalibOverrides {
    pub fn apply(&self, base: &CalibConfig) -> CalibConfig {
        CalibConfig {
            lambda_d: self.lambda_d.unwrap_or(base.lambda_d),
            lambda_r: self.lambda_r.unwrap_or(base.lambda_r),
            lambda_freeze: self.lambda_freeze.unwrap_or(base.lambda_freeze),
            lr_ratio: self.lr_ratio.unwrap_or(base.lr_ratio),
            lr_codebook: self.lr_codebook.unwrap_or(base.lr_codebook),
            batch: self.batch.unwrap_or(base.batch),
            iters: self.iters.unwrap_or(base.iters),
            n: self.n.unwrap_or(base.n),
            mode: self.mode.unwrap_or(base.mode),
            tune_biases: self.tune_biases.unwrap_or(base.tune_biases),
            seed: base.seed,
            grad_check_every: self.grad_check_every.unwrap_or(base.grad_check_every),
        }
    }
}

/// A required path from the flag, else the config file.
pub fn require_path(flag: &Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| config.clone())
        .ok_or_else(|| CliError::input(format!("no {what} path given (flag or config)")))
}

/// `base` with `suffix` appended to its file name.
pub fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_document() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            model = "m.vqt"
            [dit]
            hidden = 32
            [plan]
            bits = 3
            [plan.layers."blocks.0.pf.fc1.weight"]
            k = 16
            d = 1
            [calib]
            iters = 20
            mode = "codebook_only"
            [cache]
            trajectories = 4
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed(), 7);
        assert_eq!(cfg.dit.hidden, Some(32));
        assert_eq!(cfg.plan.global().unwrap(), QuantPlan { d: 2, k: 64 });
        assert_eq!(cfg.plan.layers["blocks.0.pf.fc1.weight"], QuantPlan { d: 1, k: 16 });
        assert_eq!(cfg.calib.iters, 20);
        assert_eq!(cfg.calib.batch, 16);
        assert_eq!(cfg.calib.mode, CalibMode::CodebookOnly);
        assert_eq!(cfg.cache.trajectories, 4);
        assert_eq!(cfg.eval.trajectories, 16);
    }

    #[test]
    fn rejects_unknown_fields() {
        assert!(toml::from_str::<RunConfig>("[calib]\nlearning_rate = 1.0").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn plan_resolution() {
        let p = |bits, k, d| PlanConfig { bits, k, d, ..Default::default() }.global();
        assert_eq!(p(None, None, None).unwrap(), QuantPlan { d: 4, k: 256 });
        assert_eq!(p(Some(3), None, None).unwrap(), QuantPlan { d: 2, k: 64 });
        assert_eq!(p(Some(2), None, Some(2)).unwrap(), QuantPlan { d: 2, k: 16 });
        assert_eq!(p(None, Some(8), Some(1)).unwrap(), QuantPlan { d: 1, k: 8 });
        assert_eq!(p(Some(2), Some(256), Some(4)).unwrap(), QuantPlan { d: 4, k: 256 });
        assert!(p(Some(3), Some(256), Some(4)).is_err());
        assert!(p(Some(5), None, None).is_err());
        assert!(p(None, Some(8), None).is_err());
        assert!(p(Some(9), None, Some(2)).is_err());
    }

    #[test]
    fn overrides_win() {
        let base = CalibConfig::default();
        let o = CalibOverrides { iters: Some(3), mode: Some(CalibMode::None), ..Default::default() };
        let c = o.apply(&base);
        assert_eq!((c.iters, c.mode, c.batch), (3, CalibMode::None, base.batch));

        let d = DitOverrides { hidden: Some(32), ..Default::default() };
        assert_eq!(d.apply(&DiTConfig::default()).hidden, 32);
        assert!(d.apply_to_loaded(&DiTConfig::default()).is_err());
        let s = DitOverrides { cfg_scale: Some(1.5), hidden: Some(64), ..Default::default() };
        assert_eq!(s.apply_to_loaded(&DiTConfig::default()).unwrap().cfg_scale, 1.5);
    }

    #[test]
    fn suffixes() {
        assert_eq!(with_suffix(Path::new("out/q.vqq"), ".cand"), PathBuf::from("out/q.vqq.cand"));
    }
}
