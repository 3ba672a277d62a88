use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_lr, CalibConfig, CalibMode, Rmsprop, TrajectoryCache, VqLayer};
use crate::dit::{dit_block, weight_name, BlockVars, DitModel, Linear, BLOCK_LINEARS};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vq::Assignments;

/// One line of the calibration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    /// 1-based.
    pub iter: usize,
    pub t: usize,
    pub ld: f64,
    pub lr: f64,
    pub loss: f64,
    pub frozen_layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_check: Option<GradCheck>,
}

/// Finite-difference probe of one gradient coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub layer: String,
    /// `"codebook"` or `"logits"`.
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct CalibOutcome {
    /// Every layer frozen, with its final codebook.
    pub layers: Vec<VqLayer>,
    pub assignments: Vec<Assignments>,
    /// Tuned biases keyed by parameter name; empty unless bias tuning is on.
    pub biases: BTreeMap<String, Tensor>,
    pub log: Vec<IterRecord>,
    /// Iteration at which each layer froze; `None` if it was only finalized at the end.
    pub freeze_iter: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy)]
struct Trainable {
    codebooks: bool,
    logits: bool,
    biases: bool,
}

const FROZEN_ALL: Trainable = Trainable { codebooks: false, logits: false, biases: false };

struct Graph {
    tape: Tape,
    loss: Var,
    ld: Var,
    lr: Option<Var>,
    /// `(quantized block output, FP target)` per item and block.
    pairs: Vec<(Var, Var)>,
    codebooks: Vec<Option<Var>>,
    logits: Vec<Option<Var>>,
    biases: Vec<Option<Var>>,
}

struct Ctx<'a> {
    model: &'a DitModel,
    cache: &'a TrajectoryCache,
    cfg: &'a CalibConfig,
    /// `(block, linear)` to layer index.
    index: HashMap<String, usize>,
    total_subvectors: usize,
}

impl Ctx<'_> {
    fn graph(
        &self,
        layers: &[VqLayer],
        biases: &[Tensor],
        items: &[(usize, usize)],
        train: Trainable,
    ) -> Result<Graph> {
        let mut tape = Tape::new();
        let mut weights = Vec::with_capacity(layers.len());
        let mut cb_vars = Vec::with_capacity(layers.len());
        let mut logit_vars = Vec::with_capacity(layers.len());
        let mut bias_vars = Vec::with_capacity(layers.len());
        let mut bias_handles = Vec::with_capacity(layers.len());
        let mut sharp_terms = Vec::new();
        let mut sharp_const = 0.0f64;

        for (layer, bias) in layers.iter().zip(biases) {
            let cb_t = layer.codebook.to_tensor();
            let cb = if train.codebooks { tape.param(cb_t) } else { tape.constant(cb_t) };
            let flat = match &layer.assignments {
                Some(a) => {
                    logit_vars.push(None);
                    tape.gather_rows(cb, Arc::new(a.0.clone()))?
                }
                None => {
                    let lt = layer.candidates.logits_tensor();
                    let logits = if train.logits { tape.param(lt) } else { tape.constant(lt) };
                    logit_vars.push(train.logits.then_some(logits));
                    let ratios = tape.softmax(logits);
                    let twice = tape.scale(ratios, 2.0);
                    let centered = tape.add_scalar(twice, -1.0);
                    let dist = tape.abs(centered);
                    sharp_terms.push(tape.sum(dist));
                    sharp_const += (layer.candidates.count() * layer.candidates.n()) as f64;
                    tape.soft_gather(cb, logits, Arc::new(layer.candidates.candidates().to_vec()))?
                }
            };
            cb_vars.push(train.codebooks.then_some(cb));
            weights.push(tape.reshape(flat, &[layer.shape.o, layer.shape.i])?);
            let b = if train.biases { tape.param(bias.clone()) } else { tape.constant(bias.clone()) };
            bias_handles.push(b);
            bias_vars.push(train.biases.then_some(b));
        }

        let heads = self.model.config.heads;
        let mut blocks = Vec::with_capacity(self.model.config.depth);
        for b in 0..self.model.config.depth {
            blocks.push(BlockVars::build(|l| {
                let j = self.index[&weight_name(b, l)];
                Ok(Linear { w: weights[j], b: bias_handles[j] })
            })?);
        }

        let mut ld: Option<Var> = None;
        let mut pairs = Vec::with_capacity(items.len() * blocks.len());
        for &(traj, t) in items {
            let step = self.cache.step(traj, t);
            let c = tape.constant(step.c.clone());
            for (b, vars) in blocks.iter().enumerate() {
                let (x_in, x_out) = &step.blocks[b];
                let x = tape.constant(x_in.clone());
                let out = dit_block(&mut tape, x, c, vars, heads)?;
                let target = tape.constant(x_out.clone());
                let e = tape.mse(out, target)?;
                pairs.push((out, target));
                ld = Some(match ld {
                    Some(acc) => tape.add(acc, e)?,
                    None => e,
                });
            }
        }
        let ld = ld.ok_or_else(|| Error::Contract("empty calibration batch".into()))?;
        let ld = tape.scale(ld, 1.0 / items.len() as f32);

        let lr = match sharp_terms.split_first() {
            None => None,
            Some((first, rest)) => {
                let mut acc = *first;
                for &s in rest {
                    acc = tape.add(acc, s)?;
                }
                let m = self.total_subvectors as f64;
                let neg = tape.scale(acc, (-1.0 / m) as f32);
                Some(tape.add_scalar(neg, (sharp_const / m) as f32))
            }
        };

        let wd = tape.scale(ld, self.cfg.lambda_d);
        let loss = match lr {
            Some(lr) if self.cfg.mode != CalibMode::CodebookOnly => {
                let wr = tape.scale(lr, self.cfg.lambda_r);
                tape.add(wd, wr)?
            }
            _ => wd,
        };
        Ok(Graph { tape, loss, ld, lr, pairs, codebooks: cb_vars, logits: logit_vars, biases: bias_vars })
    }
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

/// Tunes codebooks and candidate logits of `layers` so each quantized block
/// reproduces the FP block output on cached FP inputs.
///
/// Every iteration draws one timestep and a batch of cached trajectories. At
/// the start of an iteration, any layer whose ratio loss is below the freeze
/// threshold commits to its argmax assignments; it then reconstructs hard
/// and only its codebook keeps training. Layers still unfrozen at the end are
/// finalized by argmax.
pub fn calibrate(
    model: &DitModel,
    mut layers: Vec<VqLayer>,
    cfg: &CalibConfig,
    cache: &TrajectoryCache,
) -> Result<CalibOutcome> {
    cfg.validate()?;
    if cache.steps() != model.config.timesteps || cache.depth() != model.config.depth {
        return Err(Error::Config("trajectory cache does not match the model configuration".into()));
    }
    let mut index = HashMap::new();
    for (j, l) in layers.iter().enumerate() {
        if model.params.get(&l.name).map(|w| w.shape()) != Some(&[l.shape.o, l.shape.i][..]) {
            return Err(Error::Config(format!("layer {} does not match a model weight", l.name)));
        }
        index.insert(l.name.clone(), j);
    }
    for b in 0..model.config.depth {
        for l in BLOCK_LINEARS {
            if !index.contains_key(&weight_name(b, l)) {
                return Err(Error::Config(format!("no quantized layer for {}", weight_name(b, l))));
            }
        }
    }

    let n = if cfg.mode == CalibMode::CodebookOnly { 1 } else { cfg.n };
    for l in layers.iter_mut() {
        if l.is_frozen() {
            continue;
        }
        if l.candidates.n() < n {
            return Err(Error::Config(format!(
                "{} has {} candidates, calibration needs {n}",
                l.name,
                l.candidates.n()
            )));
        }
        if l.candidates.n() > n {
            l.candidates = l.candidates.truncated(n)?;
        }
    }

    let mut freeze_iter = vec![None; layers.len()];
    let bias_names: Vec<String> = layers.iter().map(|l| l.name.replace(".weight", ".bias")).collect();
    let mut biases = Vec::with_capacity(layers.len());
    for name in &bias_names {
        biases.push(
            model.params.get(name).cloned().ok_or_else(|| Error::Config(format!("model has no parameter {name}")))?,
        );
    }

    if cfg.mode == CalibMode::CodebookOnly {
        layers.iter_mut().for_each(VqLayer::freeze);
    }
    let mut log = Vec::new();
    if cfg.mode != CalibMode::None {
        let ctx =
            Ctx { model, cache, cfg, index, total_subvectors: layers.iter().map(|l| l.shape.subvector_count()).sum() };
        let train = Trainable {
            codebooks: cfg.mode != CalibMode::AssignmentOnly,
            logits: matches!(cfg.mode, CalibMode::Full | CalibMode::AssignmentOnly),
            biases: cfg.tune_biases,
        };
        let mut opt_cb: Vec<Rmsprop> =
            layers.iter().map(|l| Rmsprop::new(l.codebook.words().len(), cfg.lr_codebook)).collect();
        let mut opt_logits: Vec<Rmsprop> =
            layers.iter().map(|l| Rmsprop::new(l.candidates.logits.len(), cfg.lr_ratio)).collect();
        let mut opt_bias: Vec<Rmsprop> = layers.iter().map(|l| Rmsprop::new(l.shape.o, cfg.lr_codebook)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        for it in 1..=cfg.iters {
            for (j, l) in layers.iter_mut().enumerate() {
                if !l.is_frozen() && l.ratio_loss() < cfg.lambda_freeze as f64 {
                    l.freeze();
                    freeze_iter[j] = Some(it);
                }
            }
            let frozen_layers = layers.iter().filter(|l| l.is_frozen()).count();

            let t = rng.random_range(1..=cache.steps());
            let trajs: Vec<usize> = if cfg.batch <= cache.len() {
                index::sample(&mut rng, cache.len(), cfg.batch).into_vec()
            } else {
                (0..cfg.batch).map(|_| rng.random_range(0..cache.len())).collect()
            };
            let items: Vec<(usize, usize)> = trajs.into_iter().map(|j| (j, t)).collect();

            let mut g = ctx.graph(&layers, &biases, &items, train)?;
            let ld = scalar(&g.tape, g.ld);
            let lr = g.lr.map_or(0.0, |v| scalar(&g.tape, v));
            let loss = scalar(&g.tape, g.loss);
            if !loss.is_finite() {
                let max_cb = layers.iter().map(|l| l.codebook.to_tensor().max_abs()).fold(0.0f32, f32::max);
                return Err(Error::Diverged {
                    iter: it,
                    detail: format!("t={t} L_d={ld} L_r={lr} L={loss} frozen={frozen_layers} max|codebook|={max_cb}"),
                });
            }
            g.tape.backward(g.loss)?;

            let grad_check = if cfg.grad_check_every > 0 && it % cfg.grad_check_every == 0 {
                probe(&ctx, &layers, &biases, &items, &g, &mut rng)?
            } else {
                None
            };

            for j in 0..layers.len() {
                if let Some(grad) = g.codebooks[j].and_then(|v| g.tape.grad(v)) {
                    opt_cb[j].step(layers[j].codebook.words_mut(), grad.data())?;
                }
                if let Some(grad) = g.logits[j].and_then(|v| g.tape.grad(v)) {
                    opt_logits[j].step(&mut layers[j].candidates.logits, grad.data())?;
                }
                if let Some(grad) = g.biases[j].and_then(|v| g.tape.grad(v)) {
                    opt_bias[j].step(biases[j].data_mut(), grad.data())?;
                }
            }
            log.push(IterRecord { iter: it, t, ld, lr, loss, frozen_layers, grad_check });
        }
    }

    layers.iter_mut().for_each(VqLayer::freeze);
    let assignments = layers.iter().map(|l| l.assignments.clone().expect("frozen")).collect();
    let biases = if cfg.tune_biases { bias_names.into_iter().zip(biases).collect() } else { BTreeMap::new() };
    Ok(CalibOutcome { layers, assignments, biases, log, freeze_iter })
}

/// Central difference of the loss along one coordinate of a random layer's
/// codebook or logits, picked as the largest analytic gradient among a few samples.
fn probe(
    ctx: &Ctx,
    layers: &[VqLayer],
    biases: &[Tensor],
    items: &[(usize, usize)],
    g: &Graph,
    rng: &mut ChaCha8Rng,
) -> Result<Option<GradCheck>> {
    let j = rng.random_range(0..layers.len());
    let use_logits = g.logits[j].is_some() && (g.codebooks[j].is_none() || rng.random_bool(0.5));
    let (var, param) = if use_logits { (g.logits[j], "logits") } else { (g.codebooks[j], "codebook") };
    let Some(grad) = var.and_then(|v| g.tape.grad(v)) else {
        return Ok(None);
    };
    let grad = grad.data();
    let h = if use_logits { 5e-2f32 } else { 1e-3f32 };
    // a ratio step is at most h/4; logits whose row sits within that of the
    // |2r - 1| kink are skipped unless exactly on it, where both sides agree
    let ratios = layers[j].candidates.ratios();
    let n = layers[j].candidates.n();
    let smooth = |c: usize| {
        if !use_logits {
            return true;
        }
        let row = &ratios[(c / n) * n..(c / n + 1) * n];
        let margin = row.iter().map(|&r| (r - 0.5).abs()).fold(f32::INFINITY, f32::min);
        margin == 0.0 || margin > h / 2.0
    };
    let mut best: Option<usize> = None;
    for _ in 0..64 {
        let c = rng.random_range(0..grad.len());
        if smooth(c) && best.is_none_or(|b| grad[c].abs() > grad[b].abs()) {
            best = Some(c);
        }
    }
    let Some(best) = best else {
        return Ok(None);
    };
    let eval = |delta: f32| -> Result<f64> {
        let mut ls = layers.to_vec();
        if use_logits {
            ls[j].candidates.logits[best] += delta;
        } else {
            ls[j].codebook.words_mut()[best] += delta;
        }
        let gg = ctx.graph(&ls, biases, items, FROZEN_ALL)?;
        let mut ld = 0.0;
        for &(out, target) in &gg.pairs {
            ld += gg.tape.value(out).mse(gg.tape.value(target))?;
        }
        let ld = ld / items.len() as f64;
        // the sharpening term is evaluated in f64 from the perturbed layer alone
        let lr = if use_logits && ctx.cfg.mode != CalibMode::CodebookOnly {
            let l = &ls[j].candidates;
            loss_lr(&l.ratios(), l.n()) * l.count() as f64 / ctx.total_subvectors as f64
        } else {
            0.0
        };
        Ok(ctx.cfg.lambda_d as f64 * ld + ctx.cfg.lambda_r as f64 * lr)
    };
    let numeric = (eval(h)? - eval(-h)?) / (2.0 * h as f64);
    let analytic = grad[best] as f64;
    let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
    Ok(Some(GradCheck { layer: layers[j].name.clone(), param: param.into(), index: best, analytic, numeric, rel_err }))
}
