//! A small diffusion transformer: conditioning embedding, `N` adaLN blocks
//! (attention and pointwise feed-forward, each behind its own adaptive layer
//! norm), and input/output projections over token latents.

mod sampler;

pub use sampler::{ddpm_sample, DdpmSchedule, Trajectory, TrajectoryStep};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{check_gradients, GradCheckReport};
use crate::tensor::{Tape, Tensor, Var};

/// Linear layers inside every block, in parameter order.
pub const BLOCK_LINEARS: [&str; 8] = ["adaln1", "adaln2", "attn.q", "attn.k", "attn.v", "attn.out", "pf.fc1", "pf.fc2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiTConfig {
    /// Number of blocks.
    pub depth: usize,
    /// Token width `d_in`.
    pub hidden: usize,
    pub heads: usize,
    pub tokens: usize,
    pub classes: usize,
    /// Sampling steps.
    pub timesteps: usize,
    pub cfg_scale: f32,
    /// Clamp for the predicted clean latent during sampling; `0` disables clamping.
    #[serde(default)]
    pub clip_denoised: f32,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            hidden: 64,
            heads: 4,
            tokens: 16,
            classes: 10,
            timesteps: 10,
            cfg_scale: 1.0,
            clip_denoised: 3.0,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.hidden < 2 || !self.hidden.is_multiple_of(2) {
            return bad(format!("hidden {} must be even and >= 2", self.hidden));
        }
        if self.timesteps < 2 {
            return bad(format!("timesteps {} must be >= 2", self.timesteps));
        }
        if self.tokens == 0 || self.classes == 0 {
            return bad("tokens and classes must be positive".into());
        }
        if !self.cfg_scale.is_finite() || self.clip_denoised.is_nan() || self.clip_denoised < 0.0 {
            return bad("cfg_scale must be finite and clip_denoised non-negative".into());
        }
        Ok(())
    }

    /// `(out, in)` extents of a block linear layer.
    pub fn linear_dims(&self, layer: &str) -> (usize, usize) {
        let h = self.hidden;
        match layer {
            "adaln1" | "adaln2" => (2 * h, h),
            "pf.fc1" => (4 * h, h),
            "pf.fc2" => (h, 4 * h),
            _ => (h, h),
        }
    }
}

pub fn weight_name(block: usize, layer: &str) -> String {
    format!("blocks.{block}.{layer}.weight")
}

pub fn bias_name(block: usize, layer: &str) -> String {
    format!("blocks.{block}.{layer}.bias")
}

/// Weight and bias handles of one linear layer on a tape. `w` is `out x in`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    /// `x W^T + b`.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let wt = tape.transpose(self.w)?;
        let y = tape.matmul(x, wt)?;
        tape.add_row(y, self.b)
    }
}

/// Tape handles for every parameter of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub adaln1: Linear,
    pub adaln2: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BlockVars {
    /// Builds handles from a per-layer constructor called in [`BLOCK_LINEARS`] order.
    pub fn build(mut f: impl FnMut(&str) -> Result<Linear>) -> Result<Self> {
        Ok(Self {
            adaln1: f("adaln1")?,
            adaln2: f("adaln2")?,
            q: f("attn.q")?,
            k: f("attn.k")?,
            v: f("attn.v")?,
            out: f("attn.out")?,
            fc1: f("pf.fc1")?,
            fc2: f("pf.fc2")?,
        })
    }
}

/// `LN(z) * (1 + gamma) + beta`, with `(gamma, beta)` regressed from `c` by `map`.
pub fn adaln(tape: &mut Tape, z: Var, c: Var, map: &Linear) -> Result<Var> {
    let width = tape.value(z).last_dim();
    let gb = map.apply(tape, c)?;
    if tape.value(gb).numel() != 2 * width {
        return Err(Error::Dimension(format!("adaLN map yields {} values for width {width}", tape.value(gb).numel())));
    }
    let gamma = tape.slice_cols(gb, 0, width)?;
    let beta = tape.slice_cols(gb, width, width)?;
    let ln = tape.layer_norm(z)?;
    let scale = tape.add_scalar(gamma, 1.0);
    let modulated = tape.mul_row(ln, scale)?;
    tape.add_row(modulated, beta)
}

/// Multi-head scaled dot-product self-attention over the rows of `x`.
pub fn attention(tape: &mut Tape, x: Var, vars: &BlockVars, heads: usize) -> Result<Var> {
    let width = tape.value(x).last_dim();
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Dimension(format!("width {width} not divisible by {heads} heads")));
    }
    let dh = width / heads;
    let q = vars.q.apply(tape, x)?;
    let k = vars.k.apply(tape, x)?;
    let v = vars.v.apply(tape, x)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());
        let probs = tape.softmax(scores);
        outs.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat_cols(&outs)?;
    vars.out.apply(tape, merged)
}

/// One block: `z + MHSA(adaLN1(z))`, then `z + PF(adaLN2(z))`.
pub fn dit_block(tape: &mut Tape, z: Var, c: Var, vars: &BlockVars, heads: usize) -> Result<Var> {
    let a = adaln(tape, z, c, &vars.adaln1)?;
    let attn = attention(tape, a, vars, heads)?;
    let z = tape.add(z, attn)?;
    let b = adaln(tape, z, c, &vars.adaln2)?;
    let hidden = vars.fc1.apply(tape, b)?;
    let hidden = tape.gelu(hidden);
    let pf = vars.fc2.apply(tape, hidden)?;
    tape.add(z, pf)
}

/// Sinusoidal embedding of a scalar timestep, `[cos(t f_j), sin(t f_j)]`.
pub fn sinusoidal_embed(t: f32, width: usize) -> Tensor {
    let half = width / 2;
    let mut data = vec![0.0f32; width];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data[j] = arg.cos() as f32;
        data[half + j] = arg.sin() as f32;
    }
    Tensor::new(vec![1, width], data).expect("positive width")
}

/// Output of one model evaluation with the per-block activations it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Predicted noise, `tokens x hidden`.
    pub eps: Tensor,
    /// Conditioning vector, `1 x hidden`.
    pub c: Tensor,
    /// `(input, output)` of every block.
    pub blocks: Vec<(Tensor, Tensor)>,
}

/// Floating-point model: configuration plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DitModel {
    pub config: DiTConfig,
    pub params: BTreeMap<String, Tensor>,
    pub schedule: DdpmSchedule,
}

impl DitModel {
    pub fn new(config: DiTConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let model = Self { schedule: DdpmSchedule::new(config.timesteps)?, config, params };
        for (name, shape) in model.expected_shapes() {
            match model.params.get(&name) {
                None => return Err(Error::Config(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Dimension(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) => t.check_finite(&name)?,
            }
        }
        if model.params.len() != model.expected_shapes().len() {
            return Err(Error::Config("unexpected extra parameters".into()));
        }
        Ok(model)
    }

    /// Every parameter name with its shape.
    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        expected_shapes(&self.config)
    }

    /// Names of the block weight matrices that get vector-quantized.
    pub fn quantizable_layers(&self) -> Vec<String> {
        (0..self.config.depth).flat_map(|b| BLOCK_LINEARS.iter().map(move |l| weight_name(b, l))).collect()
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    /// Deterministic random initialization.
    pub fn random(config: DiTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in expected_shapes(&config) {
            let std = if name.ends_with(".bias") {
                0.02
            } else if name == "class_embed" || name == "pos_embed" {
                0.5
            } else {
                // weights are out x in
                1.0 / (shape[1] as f32).sqrt()
            };
            params.insert(name, Tensor::randn(&shape, std, &mut rng));
        }
        Self::new(config, params)
    }

    fn check_label(&self, y: usize, allow_null: bool) -> Result<()> {
        let lo = if allow_null { 0 } else { 1 };
        if y < lo || y > self.config.classes {
            return Err(Error::Input(format!("class label {y} outside [1, {}]", self.config.classes)));
        }
        Ok(())
    }

    fn linear_const(&self, tape: &mut Tape, prefix: &str) -> Linear {
        Linear {
            w: tape.constant(self.param(&format!("{prefix}.weight")).clone()),
            b: tape.constant(self.param(&format!("{prefix}.bias")).clone()),
        }
    }

    /// Conditioning vector for timestep index `t` in `[1, T]` and label `y`
    /// (`0` is the null label used for guidance).
    pub fn condition(&self, tape: &mut Tape, t: usize, y: usize) -> Result<Var> {
        self.check_label(y, true)?;
        let step = self.schedule.model_timestep(t)?;
        let emb = tape.constant(sinusoidal_embed(step as f32, self.config.hidden));
        let l1 = self.linear_const(tape, "t_embed.fc1");
        let l2 = self.linear_const(tape, "t_embed.fc2");
        let h = l1.apply(tape, emb)?;
        let h = tape.gelu(h);
        let h = l2.apply(tape, h)?;
        let table = self.param("class_embed");
        let row = Tensor::new(vec![1, self.config.hidden], table.row(y).to_vec())?;
        let class = tape.constant(row);
        tape.add(h, class)
    }

    /// Conditioning vector as a plain tensor; `y` must be a real label.
    pub fn condition_embed(&self, t: usize, y: usize) -> Result<Tensor> {
        self.check_label(y, false)?;
        let mut tape = Tape::new();
        let c = self.condition(&mut tape, t, y)?;
        Ok(tape.value(c).clone())
    }

    pub fn block_vars(&self, tape: &mut Tape, block: usize) -> Result<BlockVars> {
        BlockVars::build(|layer| Ok(self.linear_const(tape, &format!("blocks.{block}.{layer}"))))
    }

    /// Noise prediction for latent `z` (`tokens x hidden`), recording block activations.
    pub fn forward(&self, z: &Tensor, t: usize, y: usize) -> Result<ForwardTrace> {
        let cfg = &self.config;
        if z.shape() != [cfg.tokens, cfg.hidden] {
            return Err(Error::Dimension(format!(
                "latent shape {:?}, expected [{}, {}]",
                z.shape(),
                cfg.tokens,
                cfg.hidden
            )));
        }
        let mut tape = Tape::new();
        let c = self.condition(&mut tape, t, y)?;
        let zv = tape.constant(z.clone());
        let inp = self.linear_const(&mut tape, "in_proj");
        let h = inp.apply(&mut tape, zv)?;
        let pos = tape.constant(self.param("pos_embed").clone());
        let mut h = tape.add(h, pos)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let vars = self.block_vars(&mut tape, b)?;
            let out = dit_block(&mut tape, h, c, &vars, cfg.heads)?;
            blocks.push((tape.value(h).clone(), tape.value(out).clone()));
            h = out;
        }
        let normed = tape.layer_norm(h)?;
        let outp = self.linear_const(&mut tape, "out_proj");
        let eps = outp.apply(&mut tape, normed)?;
        let eps = tape.value(eps).clone();
        eps.check_finite("noise prediction")?;
        Ok(ForwardTrace { eps, c: tape.value(c).clone(), blocks })
    }

    /// A copy with the named weights replaced.
    pub fn with_weights(&self, replacements: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut params = self.params.clone();
        for (name, w) in replacements {
            let slot = params.get_mut(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            if slot.shape() != w.shape() {
                return Err(Error::Dimension(format!("replacement for {name} has wrong shape")));
            }
            *slot = w.clone();
        }
        Self::new(self.config.clone(), params)
    }
}

fn expected_shapes(cfg: &DiTConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden;
    let mut out =
        vec![("pos_embed".to_string(), vec![cfg.tokens, h]), ("class_embed".to_string(), vec![cfg.classes + 1, h])];
    for prefix in ["in_proj", "out_proj", "t_embed.fc1", "t_embed.fc2"] {
        out.push((format!("{prefix}.weight"), vec![h, h]));
        out.push((format!("{prefix}.bias"), vec![h]));
    }
    for b in 0..cfg.depth {
        for layer in BLOCK_LINEARS {
            let (o, i) = cfg.linear_dims(layer);
            out.push((weight_name(b, layer), vec![o, i]));
            out.push((bias_name(b, layer), vec![o]));
        }
    }
    out.sort();
    out
}

/// Finite-difference checks of adaLN, attention, and a whole block on a
/// 4-token, width-8, 2-head instance, differentiating every input and parameter.
pub fn block_gradcheck(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    const TOK: usize = 4;
    const W: usize = 8;
    const HEADS: usize = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::randn(&[TOK, W], 1.0, &mut rng);
    let c = Tensor::randn(&[1, W], 1.0, &mut rng);
    let mut params = Vec::new();
    for layer in BLOCK_LINEARS {
        let (o, i) = match layer {
            "adaln1" | "adaln2" => (2 * W, W),
            "pf.fc1" => (4 * W, W),
            "pf.fc2" => (W, 4 * W),
            _ => (W, W),
        };
        params.push(Tensor::randn(&[o, i], 0.5 / (i as f32).sqrt(), &mut rng));
        params.push(Tensor::randn(&[o], 0.1, &mut rng));
    }
    let vars_from = |v: &[Var]| {
        let mut it = 0;
        BlockVars::build(|_| {
            let l = Linear { w: v[2 + 2 * it], b: v[3 + 2 * it] };
            it += 1;
            Ok(l)
        })
    };
    let mut inputs = vec![z, c];
    inputs.extend(params);

    let adaln_inputs = inputs[..4].to_vec();
    let adaln_r =
        check_gradients(|t, v| adaln(t, v[0], v[1], &Linear { w: v[2], b: v[3] }), &adaln_inputs, 1e-2, seed)?;
    let attn_r = check_gradients(
        |t, v| {
            let vars = vars_from(v)?;
            attention(t, v[0], &vars, HEADS)
        },
        &inputs,
        1e-2,
        seed + 1,
    )?;
    let block_r = check_gradients(
        |t, v| {
            let vars = vars_from(v)?;
            dit_block(t, v[0], v[1], &vars, HEADS)
        },
        &inputs,
        1e-2,
        seed + 2,
    )?;
    Ok(vec![("adaln", adaln_r), ("attention", attn_r), ("dit_block", block_r)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DiTConfig {
        DiTConfig { depth: 1, hidden: 8, heads: 2, tokens: 4, classes: 3, timesteps: 4, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(DiTConfig::default().validate().is_ok());
        assert!(DiTConfig { heads: 3, ..small() }.validate().is_err());
        assert!(DiTConfig { timesteps: 1, ..small() }.validate().is_err());
        assert!(DiTConfig { depth: 0, ..small() }.validate().is_err());
    }

    #[test]
    fn zero_block_is_identity() {
        let mut tape = Tape::new();
        let cfg = small();
        let z = tape.constant(Tensor::randn(&[4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let c = tape.constant(Tensor::full(&[1, 8], 0.3));
        let vars = BlockVars::build(|layer| {
            let (o, i) = cfg.linear_dims(layer);
            Ok(Linear { w: tape.constant(Tensor::zeros(&[o, i])), b: tape.constant(Tensor::zeros(&[o])) })
        })
        .unwrap();
        let out = dit_block(&mut tape, z, c, &vars, 2).unwrap();
        assert_eq!(tape.value(out), tape.value(z));
    }

    #[test]
    fn adaln_with_zero_map_is_layer_norm() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::randn(&[3, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let c = tape.constant(Tensor::full(&[1, 6], 1.0));
        let map = Linear { w: tape.constant(Tensor::zeros(&[12, 6])), b: tape.constant(Tensor::zeros(&[12])) };
        let a = adaln(&mut tape, z, c, &map).unwrap();
        let ln = tape.layer_norm(z).unwrap();
        assert_eq!(tape.value(a), tape.value(ln));
    }

    #[test]
    fn adaln_on_constant_rows_is_beta() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::full(&[2, 4], 7.0));
        let c = tape.constant(Tensor::from_rows(&[&[1.0, 0.0, 0.0, 0.0]]));
        let mut w = Tensor::zeros(&[8, 4]);
        for r in 0..8 {
            w.data_mut()[r * 4] = r as f32 * 0.5;
        }
        let map = Linear { w: tape.constant(w), b: tape.constant(Tensor::zeros(&[8])) };
        let a = adaln(&mut tape, z, c, &map).unwrap();
        for row in tape.value(a).data().chunks(4) {
            assert_eq!(row, &[2.0, 2.5, 3.0, 3.5]);
        }
    }

    #[test]
    fn label_range_checked() {
        let model = DitModel::random(small(), 0).unwrap();
        assert!(matches!(model.condition_embed(1, 0), Err(Error::Input(_))));
        assert!(matches!(model.condition_embed(1, 4), Err(Error::Input(_))));
        assert_eq!(model.condition_embed(1, 3).unwrap().shape(), &[1, 8]);
    }

    #[test]
    fn random_model_is_deterministic() {
        assert_eq!(DitModel::random(small(), 5).unwrap(), DitModel::random(small(), 5).unwrap());
        assert_ne!(DitModel::random(small(), 5).unwrap(), DitModel::random(small(), 6).unwrap());
    }

    #[test]
    fn block_gradients() {
        for (name, r) in block_gradcheck(0).unwrap() {
            assert!(r.max_rel_err() < 1e-2, "{name}: {r:?}");
        }
    }
}
