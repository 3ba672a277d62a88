//! Central finite-difference checks of tape gradients.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const NORM_FLOOR: f64 = 1e-3;

/// Gradient agreement for one input of a checked function.
#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    pub input: usize,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, NORM_FLOOR)`.
    pub rel_err: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// The scalar probed is `sum(seed * f(inputs))` with a fixed Gaussian `seed`,
/// so every output element contributes. Each input coordinate is perturbed by
/// `+-h`; the probe is accumulated in `f64`. Gradients whose norms are both
/// below [`NORM_FLOOR`] compare against the floor rather than each other.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f32, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let cot = Tensor::randn(tape.value(out).shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    tape.backward_with(out, &cot)?;

    let probe = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data().iter().zip(cot.data()).map(|(&a, &b)| a as f64 * b as f64).sum())
    };

    let mut report = GradCheckReport { inputs: Vec::with_capacity(inputs.len()) };
    let mut xs = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).unwrap_or_else(|| Tensor::zeros(inputs[idx].shape()));
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for c in 0..inputs[idx].numel() {
            let orig = xs[idx].data()[c];
            xs[idx].data_mut()[c] = orig + h;
            let up = probe(&xs)?;
            xs[idx].data_mut()[c] = orig - h;
            let down = probe(&xs)?;
            xs[idx].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h as f64);
            let a = analytic.data()[c] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let rel_err = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(NORM_FLOOR);
        report.inputs.push(InputCheck { input: idx, rel_err, analytic_norm: a2.sqrt() });
    }
    Ok(report)
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero by at least `0.25`.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = gaussian(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v += 0.25f32.copysign(*v));
    t
}

type Case = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>, Vec<Tensor>);

/// Every differentiable tape operation on small random inputs.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let idx = Arc::new(vec![2u32, 0, 2, 1]);
    let cand = Arc::new(vec![0u32, 3, 2, 1, 3, 2]);
    let cases: Vec<Case> = vec![
        ("matmul", Box::new(|t, v| t.matmul(v[0], v[1])), vec![gaussian(&[3, 4], r), gaussian(&[4, 5], r)]),
        ("transpose", Box::new(|t, v| t.transpose(v[0])), vec![gaussian(&[3, 4], r)]),
        ("reshape", Box::new(|t, v| t.reshape(v[0], &[2, 6])), vec![gaussian(&[3, 4], r)]),
        ("add", Box::new(|t, v| t.add(v[0], v[1])), vec![gaussian(&[3, 4], r), gaussian(&[3, 4], r)]),
        ("sub", Box::new(|t, v| t.sub(v[0], v[1])), vec![gaussian(&[3, 4], r), gaussian(&[3, 4], r)]),
        ("mul", Box::new(|t, v| t.mul(v[0], v[1])), vec![gaussian(&[3, 4], r), gaussian(&[3, 4], r)]),
        ("add_row", Box::new(|t, v| t.add_row(v[0], v[1])), vec![gaussian(&[3, 4], r), gaussian(&[4], r)]),
        ("mul_row", Box::new(|t, v| t.mul_row(v[0], v[1])), vec![gaussian(&[3, 4], r), gaussian(&[1, 4], r)]),
        ("scale", Box::new(|t, v| Ok(t.scale(v[0], -1.5))), vec![gaussian(&[3, 4], r)]),
        ("add_scalar", Box::new(|t, v| Ok(t.add_scalar(v[0], 0.7))), vec![gaussian(&[3, 4], r)]),
        ("abs", Box::new(|t, v| Ok(t.abs(v[0]))), vec![off_zero(&[3, 4], r)]),
        ("gelu", Box::new(|t, v| Ok(t.gelu(v[0]))), vec![gaussian(&[3, 4], r)]),
        ("layer_norm", Box::new(|t, v| t.layer_norm(v[0])), vec![gaussian(&[3, 6], r)]),
        ("softmax", Box::new(|t, v| Ok(t.softmax(v[0]))), vec![gaussian(&[3, 5], r)]),
        ("slice_cols", Box::new(|t, v| t.slice_cols(v[0], 1, 2)), vec![gaussian(&[3, 4], r)]),
        (
            "concat_cols",
            Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
            vec![gaussian(&[3, 2], r), gaussian(&[3, 3], r)],
        ),
        ("sum", Box::new(|t, v| Ok(t.sum(v[0]))), vec![gaussian(&[3, 4], r)]),
        ("mse", Box::new(|t, v| t.mse(v[0], v[1])), vec![gaussian(&[3, 4], r), gaussian(&[3, 4], r)]),
        ("gather_rows", Box::new(move |t, v| t.gather_rows(v[0], idx.clone())), vec![gaussian(&[3, 2], r)]),
        (
            "soft_gather",
            Box::new(move |t, v| t.soft_gather(v[0], v[1], cand.clone())),
            vec![gaussian(&[4, 3], r), gaussian(&[3, 2], r)],
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(j, (name, f, inputs))| Ok((name, check_gradients(f, &inputs, 1e-2, seed.wrapping_add(j as u64))?)))
        .collect()
}
