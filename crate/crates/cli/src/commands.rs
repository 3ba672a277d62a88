use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};

use serde::Serialize;
use vqcal_core::calib::{
    block_output_mse, calibrate as run_calibration, candidate_position_report, candidate_sidecar, final_latent_mse,
    grad_cosine_report, init_layers_with, layers_from_artifacts, layers_from_quantized, to_quantized_model, IterRecord,
    PositionReport, QuantPlan, TrajectoryCache, COSINE_BINS,
};
use vqcal_core::dit::{DiTConfig, DitModel};
use vqcal_core::modelio::{
    model_to_container, parse_container, read_model, read_quantized, write_quantized, QuantizedModel, MAGIC,
};
use vqcal_core::vq::{uniform_quantize, KMeansParams, LayerShape};

use crate::config::{require_path, with_suffix, CalibOverrides, DitOverrides, RunConfig};
use crate::CliError;

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<DitModel, CliError> {
    read_model(&read_bytes(path)?).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn load_quantized(path: &Path) -> Result<QuantizedModel, CliError> {
    read_quantized(&read_bytes(path)?).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn is_quantized_file(bytes: &[u8]) -> bool {
    bytes.len() >= 4 && bytes[..4] == MAGIC.to_le_bytes()
}

fn same_structure(a: &DiTConfig, b: &DiTConfig) -> bool {
    (a.depth, a.hidden, a.heads, a.tokens, a.classes, a.timesteps)
        == (b.depth, b.hidden, b.heads, b.tokens, b.classes, b.timesteps)
}

fn check_structure(fp: &DiTConfig, other: &DiTConfig, what: &str) -> Result<(), CliError> {
    if same_structure(fp, other) {
        Ok(())
    } else {
        Err(CliError::input(format!("{what} was built for a different model configuration")))
    }
}

/// A quantized model's hard reconstruction, sampling with the floating-point model's settings.
fn hard_model(q: &QuantizedModel, fp: &DiTConfig) -> Result<DitModel, CliError> {
    let mut m = q.to_dit_model()?;
    m.config = fp.clone();
    Ok(m)
}

/// Floating-point trajectories, reused from `cache_dir` when a matching file exists there.
fn trajectories(
    model: &DitModel,
    count: usize,
    seed: u64,
    cfg_scale: f32,
    cache_dir: Option<&Path>,
) -> Result<TrajectoryCache, CliError> {
    let Some(dir) = cache_dir else {
        return Ok(TrajectoryCache::generate(model, count, seed, cfg_scale)?);
    };
    let mut h = DefaultHasher::new();
    model_to_container(model).to_bytes().hash(&mut h);
    (count, seed, cfg_scale.to_bits()).hash(&mut h);
    let path = dir.join(format!("traj-{:016x}.vqt", h.finish()));
    if let Ok(bytes) = std::fs::read(&path) {
        let cached =
            parse_container(&bytes).map_err(vqcal_core::Error::from).and_then(|c| TrajectoryCache::from_container(&c));
        if let Ok(cache) = cached {
            if cache.len() == count && cache.steps() == model.config.timesteps && cache.depth() == model.config.depth {
                return Ok(cache);
            }
        }
    }
    let cache = TrajectoryCache::generate(model, count, seed, cfg_scale)?;
    let tmp = with_suffix(&path, &format!(".{}.tmp", std::process::id()));
    write_bytes(&tmp, &cache.to_container().to_bytes())?;
    std::fs::rename(&tmp, &path).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))?;
    Ok(cache)
}

pub fn make_toy_model(
    cfg: &RunConfig,
    out: Option<PathBuf>,
    seed: Option<u64>,
    dit: &DitOverrides,
) -> Result<(), CliError> {
    let out = require_path(&out, &cfg.out, "output")?;
    let config = cfg.dit.merged(dit).apply(&DiTConfig::default());
    let seed = seed.unwrap_or(cfg.seed());
    let model = DitModel::random(config, seed)?;
    write_bytes(&out, &model_to_container(&model).to_bytes())?;
    let c = &model.config;
    println!(
        "wrote {}: depth {} hidden {} heads {} tokens {} classes {} T {} seed {seed}",
        out.display(),
        c.depth,
        c.hidden,
        c.heads,
        c.tokens,
        c.classes,
        c.timesteps
    );
    Ok(())
}

pub struct QuantizeArgs {
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    pub bits: Option<u32>,
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub n: Option<usize>,
    pub kmeans_iters: Option<usize>,
    pub seed: Option<u64>,
}

/// Every problem with the per-layer plan, one line per layer.
fn plan_diagnostics(model: &DitModel, plans: &BTreeMap<String, QuantPlan>, n: usize) -> Vec<String> {
    let mut problems = Vec::new();
    for (name, plan) in plans {
        let (o, i) = (model.param(name).shape()[0], model.param(name).shape()[1]);
        match LayerShape::new(o, i, plan.d, plan.k) {
            Err(e) => problems.push(format!("{name} ({o}x{i}, k={}, d={}): {e}", plan.k, plan.d)),
            Ok(shape) if shape.subvector_count() < plan.k => problems.push(format!(
                "{name}: {} sub-vectors cannot seed k={} codewords",
                shape.subvector_count(),
                plan.k
            )),
            Ok(_) if n > plan.k => problems.push(format!("{name}: n={n} exceeds k={}", plan.k)),
            Ok(_) => {}
        }
    }
    problems
}

pub fn quantize(cfg: &RunConfig, args: QuantizeArgs) -> Result<(), CliError> {
    let model_path = require_path(&args.model, &cfg.model, "model")?;
    let out = require_path(&args.out, &cfg.out, "output")?;
    let sidecar = args.sidecar.or_else(|| cfg.sidecar.clone()).unwrap_or_else(|| with_suffix(&out, ".cand"));
    let model = load_model(&model_path)?;

    let mut plan_cfg = cfg.plan.clone();
    if args.bits.is_some() || args.k.is_some() || args.d.is_some() {
        (plan_cfg.bits, plan_cfg.k, plan_cfg.d) = (args.bits, args.k, args.d);
    }
    let global = plan_cfg.global()?;
    let layers = model.quantizable_layers();
    if let Some(unknown) = plan_cfg.layers.keys().find(|k| !layers.contains(k)) {
        return Err(CliError::input(format!("plan names unknown layer {unknown}")));
    }
    let plans: BTreeMap<String, QuantPlan> =
        layers.iter().map(|l| (l.clone(), plan_cfg.layers.get(l).copied().unwrap_or(global))).collect();
    let n = args.n.unwrap_or(cfg.calib.n);
    let problems = plan_diagnostics(&model, &plans, n);
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("invalid plan: {p}");
        }
        return Err(CliError::input(format!("invalid plan for {} layer(s)", problems.len())));
    }

    let params = KMeansParams {
        seed: args.seed.unwrap_or(cfg.seed()),
        max_iters: args.kmeans_iters.unwrap_or(plan_cfg.kmeans_iters),
        ..Default::default()
    };
    let vq = init_layers_with(&model, |name| plans[name], n, &params)?;
    let q = to_quantized_model(&model, &vq, &BTreeMap::new())?;
    write_bytes(&out, &write_quantized(&q)?)?;
    write_bytes(&sidecar, &candidate_sidecar(&vq)?.to_bytes())?;

    let mut table = format!(
        "{:<28} {:>9} {:>6} {:>13} {:>15} {:>12}\n",
        "layer", "k x d", "bits", "codebook MB", "assignment MB", "weight MSE"
    );
    let (mut cb, mut asg) = (0u64, 0u64);
    for (l, ql) in vq.iter().zip(&q.layers) {
        let s = ql.storage();
        let mse = model.param(&l.name).mse(&l.hard_weight()?)?;
        cb += s.codebook_bytes();
        asg += s.assignment_bytes();
        let _ = writeln!(
            table,
            "{:<28} {:>9} {:>6.3} {:>13.6} {:>15.6} {:>12.4e}",
            l.name,
            format!("{}x{}", l.shape.k, l.shape.d),
            s.effective_bits_per_weight,
            s.codebook_bytes() as f64 / 1e6,
            s.assignment_bytes() as f64 / 1e6,
            mse
        );
    }
    let _ = writeln!(table, "{:<28} {:>9} {:>6} {:>13.6} {:>15.6}", "total", "", "", cb as f64 / 1e6, asg as f64 / 1e6);
    print!("{table}");
    println!("wrote {} and {}", out.display(), sidecar.display());
    Ok(())
}

pub struct CalibrateArgs {
    pub model: Option<PathBuf>,
    pub quantized: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub seed: Option<u64>,
    pub trajectories: Option<usize>,
    pub cache_seed: Option<u64>,
    pub cache_cfg_scale: Option<f32>,
    pub cache_dir: Option<PathBuf>,
    pub calib: CalibOverrides,
    pub dit: DitOverrides,
}

#[derive(Serialize)]
struct DivergenceSnapshot<'a> {
    error: &'a str,
    config: &'a vqcal_core::calib::CalibConfig,
}

pub fn calibrate(cfg: &RunConfig, args: CalibrateArgs) -> Result<(), CliError> {
    let model_path = require_path(&args.model, &cfg.model, "model")?;
    let q_path = require_path(&args.quantized, &cfg.quantized, "quantized model")?;
    let out = require_path(&args.out, &cfg.out, "output")?;
    let sidecar = args.sidecar.or_else(|| cfg.sidecar.clone()).unwrap_or_else(|| with_suffix(&q_path, ".cand"));
    let log_path = args.log.or_else(|| cfg.log.clone()).unwrap_or_else(|| with_suffix(&out, ".log.jsonl"));

    let mut model = load_model(&model_path)?;
    model.config = cfg.dit.merged(&args.dit).apply_to_loaded(&model.config)?;
    let q = load_quantized(&q_path)?;
    check_structure(&model.config, &q.config, "quantized model")?;
    let side = parse_container(&read_bytes(&sidecar)?)?;
    let layers = layers_from_artifacts(&q, &side)?;

    let mut calib = args.calib.apply(&cfg.calib);
    calib.seed = args.seed.or(cfg.seed).unwrap_or(cfg.calib.seed);
    calib.validate()?;
    let cache = trajectories(
        &model,
        args.trajectories.unwrap_or(cfg.cache.trajectories),
        args.cache_seed.unwrap_or(cfg.cache.seed),
        args.cache_cfg_scale.unwrap_or(cfg.cache.cfg_scale),
        args.cache_dir.as_deref().or(cfg.cache_dir.as_deref()),
    )?;

    let outcome = match run_calibration(&model, layers, &calib, &cache) {
        Ok(o) => o,
        Err(e) => {
            let err = CliError::from(e);
            if err.code == 3 {
                let snap = with_suffix(&out, ".diverged.json");
                let body = serde_json::to_string_pretty(&DivergenceSnapshot { error: &err.message, config: &calib })
                    .expect("serializable");
                write_bytes(&snap, body.as_bytes())?;
                eprintln!("snapshot written to {}", snap.display());
            }
            return Err(err);
        }
    };

    let final_q = to_quantized_model(&model, &outcome.layers, &outcome.biases)?;
    write_bytes(&out, &write_quantized(&final_q)?)?;
    let out_side = with_suffix(&out, ".cand");
    write_bytes(&out_side, &candidate_sidecar(&outcome.layers)?.to_bytes())?;
    let mut log = String::new();
    for r in &outcome.log {
        log.push_str(&serde_json::to_string(r).expect("serializable"));
        log.push('\n');
    }
    write_bytes(&log_path, log.as_bytes())?;

    let frozen_early = outcome.freeze_iter.iter().filter(|f| f.is_some()).count();
    if let Some(last) = outcome.log.last() {
        println!(
            "{} iterations: L_d {:.6e} L_r {:.6e} L {:.6e}; {frozen_early}/{} layers froze before the end",
            outcome.log.len(),
            last.ld,
            last.lr,
            last.loss,
            outcome.layers.len()
        );
    }
    println!("wrote {}, {} and {}", out.display(), out_side.display(), log_path.display());
    Ok(())
}

pub struct EvalArgs {
    pub model: Option<PathBuf>,
    pub rows: Vec<String>,
    pub uq_bits: Vec<u32>,
    pub trajectories: Option<usize>,
    pub eval_seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub dit: DitOverrides,
}

#[derive(Debug, Serialize)]
struct LayerMetrics {
    name: String,
    method: String,
    effective_bits: f64,
    weight_bits: u64,
    weight_mse: f64,
}

#[derive(Debug, Serialize)]
struct RowMetrics {
    label: String,
    layers: Vec<LayerMetrics>,
    block_mse: Vec<f64>,
    mean_block_mse: f64,
    final_latent_mse: f64,
    total_weight_bytes: u64,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    trajectories: usize,
    seed: u64,
    cfg_scale: f32,
    rows: Vec<RowMetrics>,
}

fn score(
    label: String,
    fp: &DitModel,
    m: &DitModel,
    layers: Vec<LayerMetrics>,
    cache: &TrajectoryCache,
) -> Result<RowMetrics, CliError> {
    let b = block_output_mse(m, cache)?;
    let total_bits: u64 = layers.iter().map(|l| l.weight_bits).sum();
    Ok(RowMetrics {
        label,
        layers,
        block_mse: b.per_block,
        mean_block_mse: b.mean,
        final_latent_mse: final_latent_mse(m, cache, fp.config.cfg_scale)?,
        total_weight_bytes: total_bits.div_ceil(8),
    })
}

fn parse_row(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(arg);
            let label = p.file_stem().map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
            (label, p)
        }
    }
}

pub fn eval(cfg: &RunConfig, args: EvalArgs) -> Result<(), CliError> {
    let model_path = require_path(&args.model, &cfg.model, "model")?;
    let mut fp = load_model(&model_path)?;
    fp.config = cfg.dit.merged(&args.dit).apply_to_loaded(&fp.config)?;
    let uq_bits = if args.uq_bits.is_empty() { cfg.eval.uq_bits.clone() } else { args.uq_bits };
    if args.rows.is_empty() && uq_bits.is_empty() {
        return Err(CliError::input("nothing to evaluate: give --row or --uq-bits"));
    }
    let count = args.trajectories.unwrap_or(cfg.eval.trajectories);
    let seed = args.eval_seed.unwrap_or(cfg.eval.seed);
    let cache =
        trajectories(&fp, count, seed, fp.config.cfg_scale, args.cache_dir.as_deref().or(cfg.cache_dir.as_deref()))?;
    let names = fp.quantizable_layers();

    let mut rows = Vec::new();
    for bits in uq_bits {
        let mut repl = BTreeMap::new();
        let mut layers = Vec::new();
        for name in &names {
            let w = fp.param(name);
            let (uq, _) = uniform_quantize(w, bits)?;
            layers.push(LayerMetrics {
                name: name.clone(),
                method: "uq".into(),
                effective_bits: bits as f64,
                weight_bits: w.numel() as u64 * bits as u64 + 32,
                weight_mse: w.mse(&uq)?,
            });
            repl.insert(name.clone(), uq);
        }
        rows.push(score(format!("uq{bits}"), &fp, &fp.with_weights(&repl)?, layers, &cache)?);
    }
    for arg in &args.rows {
        let (label, path) = parse_row(arg);
        let bytes = read_bytes(&path)?;
        let (m, layers) = if is_quantized_file(&bytes) {
            let q = read_quantized(&bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            check_structure(&fp.config, &q.config, &label)?;
            let m = hard_model(&q, &fp.config)?;
            let layers = q
                .layers
                .iter()
                .map(|l| {
                    let s = l.storage();
                    Ok(LayerMetrics {
                        name: l.name.clone(),
                        method: "vq".into(),
                        effective_bits: s.effective_bits_per_weight,
                        weight_bits: s.assignment_bits + s.codebook_bits,
                        weight_mse: fp.param(&l.name).mse(m.param(&l.name))?,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            (m, layers)
        } else {
            let mut m = read_model(&bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            check_structure(&fp.config, &m.config, &label)?;
            m.config = fp.config.clone();
            let layers = names
                .iter()
                .map(|name| {
                    Ok(LayerMetrics {
                        name: name.clone(),
                        method: "fp".into(),
                        effective_bits: 32.0,
                        weight_bits: m.param(name).numel() as u64 * 32,
                        weight_mse: fp.param(name).mse(m.param(name))?,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            (m, layers)
        };
        rows.push(score(label, &fp, &m, layers, &cache)?);
    }

    println!(
        "{:<16} {:>8} {:>12} {:>14} {:>15} {:>17}",
        "row", "bits", "weight KB", "weight MSE", "block-out MSE", "final-latent MSE"
    );
    for r in &rows {
        let bits = r.layers.iter().map(|l| l.effective_bits).sum::<f64>() / r.layers.len().max(1) as f64;
        let wmse = r.layers.iter().map(|l| l.weight_mse).sum::<f64>() / r.layers.len().max(1) as f64;
        println!(
            "{:<16} {:>8.3} {:>12.2} {:>14.6e} {:>15.6e} {:>17.6e}",
            r.label,
            bits,
            r.total_weight_bytes as f64 / 1e3,
            wmse,
            r.mean_block_mse,
            r.final_latent_mse
        );
    }
    let report = EvalReport { trajectories: count, seed, cfg_scale: fp.config.cfg_scale, rows };
    if let Some(out) = args.out.or_else(|| cfg.out.clone()) {
        write_bytes(&out, serde_json::to_string_pretty(&report).expect("serializable").as_bytes())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct PositionSummary {
    pooled: PositionReport,
    layers: BTreeMap<String, PositionReport>,
}

pub fn report(log: &Path, quantized: &Path, sidecar: Option<PathBuf>, out_dir: &Path) -> Result<(), CliError> {
    let text = String::from_utf8(read_bytes(log)?).map_err(|_| CliError::input("log is not UTF-8"))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(j, l)| {
            serde_json::from_str::<IterRecord>(l).map_err(|e| CliError::input(format!("log line {}: {e}", j + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let q = load_quantized(quantized)?;
    let side_path = sidecar.unwrap_or_else(|| with_suffix(quantized, ".cand"));
    let layers = layers_from_artifacts(&q, &parse_container(&read_bytes(&side_path)?)?)?;

    let mut per_layer = BTreeMap::new();
    let mut pooled: Option<PositionReport> = None;
    for (ql, vl) in q.layers.iter().zip(&layers) {
        let r = candidate_position_report(&ql.assignments()?, &vl.candidates)?;
        pooled = Some(match pooled {
            None => r.clone(),
            Some(p) => p.merge(&r)?,
        });
        per_layer.insert(ql.name.clone(), r);
    }
    let pooled = pooled.ok_or_else(|| CliError::input("quantized model has no layers"))?;

    let mut curve = String::from("iter,t,ld,lr,loss,frozen_layers\n");
    for r in &records {
        let _ = writeln!(curve, "{},{},{:e},{:e},{:e},{}", r.iter, r.t, r.ld, r.lr, r.loss, r.frozen_layers);
    }
    let n = pooled.counts.len();
    let mut positions = String::from("layer");
    for p in 1..=n {
        let _ = write!(positions, ",position{p}");
    }
    positions.push('\n');
    for (name, r) in per_layer.iter().chain([(&"all".to_string(), &pooled)]) {
        positions.push_str(name);
        for v in &r.proportions {
            let _ = write!(positions, ",{v}");
        }
        positions.push('\n');
    }

    let mut summary = format!("iterations: {}\n", records.len());
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        let min_lr = records.iter().map(|r| r.lr).fold(f64::INFINITY, f64::min);
        let _ = writeln!(summary, "loss: {:.6e} -> {:.6e}", first.loss, last.loss);
        let _ = writeln!(summary, "block loss: {:.6e} -> {:.6e}", first.ld, last.ld);
        let _ = writeln!(summary, "ratio loss: {:.6e} -> {:.6e} (min {min_lr:.6e})", first.lr, last.lr);
        let _ = writeln!(summary, "frozen layers at the last iteration: {}", last.frozen_layers);
    }
    let _ = writeln!(summary, "candidate positions (n = {n}):");
    for (p, (c, share)) in pooled.counts.iter().zip(&pooled.proportions).enumerate() {
        let _ = writeln!(summary, "  position {}: {c} ({:.4})", p + 1, share);
    }

    let json = PositionSummary { pooled, layers: per_layer };
    write_bytes(&out_dir.join("loss_curve.csv"), curve.as_bytes())?;
    write_bytes(&out_dir.join("positions.csv"), positions.as_bytes())?;
    write_bytes(
        &out_dir.join("positions.json"),
        serde_json::to_string_pretty(&json).expect("serializable").as_bytes(),
    )?;
    write_bytes(&out_dir.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    println!("wrote loss_curve.csv, positions.csv, positions.json and summary.txt to {}", out_dir.display());
    Ok(())
}

pub struct DiagnoseArgs {
    pub model: Option<PathBuf>,
    pub quantized: Option<PathBuf>,
    pub trajectories: Option<usize>,
    pub cache_seed: Option<u64>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

pub fn diagnose(cfg: &RunConfig, args: DiagnoseArgs) -> Result<(), CliError> {
    let fp = load_model(&require_path(&args.model, &cfg.model, "model")?)?;
    let q = load_quantized(&require_path(&args.quantized, &cfg.quantized, "quantized model")?)?;
    check_structure(&fp.config, &q.config, "quantized model")?;
    let cache = trajectories(
        &fp,
        args.trajectories.unwrap_or(cfg.cache.trajectories),
        args.cache_seed.unwrap_or(cfg.cache.seed),
        cfg.cache.cfg_scale,
        args.cache_dir.as_deref().or(cfg.cache_dir.as_deref()),
    )?;
    let layers = layers_from_quantized(&q)?;
    let assignments: Vec<_> = layers.iter().map(|l| l.current_assignments()).collect();
    let report = grad_cosine_report(
        &hard_model(&q, &fp.config)?,
        &layers,
        &assignments,
        &cache,
        args.samples.unwrap_or(cfg.eval.cosine_samples),
        args.seed.unwrap_or(cfg.seed()),
    )?;
    println!("codewords with >= 2 gradient members: {}", report.codewords.len());
    println!("mean same-assignment gradient cosine: {:.6}", report.mean);
    let width = 2.0 / COSINE_BINS as f64;
    for (b, c) in report.histogram.iter().enumerate() {
        let lo = -1.0 + b as f64 * width;
        println!("  [{lo:+.1}, {:+.1}): {c}", lo + width);
    }
    if let Some(out) = args.out.or_else(|| cfg.out.clone()) {
        write_bytes(&out, serde_json::to_string_pretty(&report).expect("serializable").as_bytes())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let bytes = read_bytes(path)?;
    if is_quantized_file(&bytes) {
        let q = read_quantized(&bytes)?;
        println!("quantized model: {}", serde_json::to_string(&q.config).expect("serializable"));
        for l in &q.layers {
            let s = l.storage();
            println!(
                "  {:<28} {}x{} k={} d={} bits/weight={} packed={}B codebook={}B",
                l.name,
                l.shape.o,
                l.shape.i,
                l.shape.k,
                l.shape.d,
                s.effective_bits_per_weight,
                l.packed.payload.len(),
                s.codebook_bytes()
            );
        }
        println!("  {} unquantized tensors", q.passthrough.len());
    } else {
        let c = parse_container(&bytes)?;
        println!("tensor container: {} tensors", c.len());
        for (k, v) in &c.metadata {
            let shown: String = v.chars().take(120).collect();
            println!("  metadata {k}: {shown}{}", if v.chars().count() > 120 { "..." } else { "" });
        }
        for name in c.names() {
            let info = c.info(name).expect("listed name");
            println!("  {name:<40} {:?} {:?}", info.dtype, info.shape);
        }
    }
    Ok(())
}
