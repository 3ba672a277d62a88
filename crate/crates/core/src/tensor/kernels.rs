//! Raw slice kernels shared by the tape and the deployment path.

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `a[m x p] * b[p x q]`, accumulated per output row in `f64`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, p: usize, q: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * q);
    let mut out = vec![0.0f32; m * q];
    let mut acc = vec![0.0f64; q];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (kk, &aik) in a[i * p..(i + 1) * p].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let aik = aik as f64;
            for (o, &bv) in acc.iter_mut().zip(&b[kk * q..(kk + 1) * q]) {
                *o += aik * bv as f64;
            }
        }
        for (o, &v) in out[i * q..(i + 1) * q].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    out
}

/// `a[m x p] * b[q x p]^T`.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, p: usize, q: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), q * p);
    let mut out = vec![0.0f32; m * q];
    for i in 0..m {
        let ar = &a[i * p..(i + 1) * p];
        for j in 0..q {
            let br = &b[j * p..(j + 1) * p];
            let dot: f64 = ar.iter().zip(br).map(|(&x, &y)| x as f64 * y as f64).sum();
            out[i * q + j] = dot as f32;
        }
    }
    out
}

/// `a[p x m]^T * b[p x q]`.
pub fn matmul_tn(a: &[f32], b: &[f32], p: usize, m: usize, q: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * q);
    let mut acc = vec![0.0f64; m * q];
    for kk in 0..p {
        let br = &b[kk * q..(kk + 1) * q];
        for (i, &aki) in a[kk * m..(kk + 1) * m].iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let aki = aki as f64;
            for (o, &bv) in acc[i * q..(i + 1) * q].iter_mut().zip(br) {
                *o += aki * bv as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Tanh-approximation GELU.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    (0.5 * x * (1.0 + u.tanh())) as f32
}

pub(crate) fn gelu_grad_scalar(x: f32) -> f64 {
    let x = x as f64;
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Softmax of one row with max subtraction.
pub(crate) fn softmax_row(src: &[f32], dst: &mut [f32]) {
    let max = src.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut sum = 0.0f64;
    let exps: Vec<f64> = src
        .iter()
        .map(|&v| {
            let e = (v as f64 - max).exp();
            sum += e;
            e
        })
        .collect();
    for (d, e) in dst.iter_mut().zip(exps) {
        *d = (e / sum) as f32;
    }
}
