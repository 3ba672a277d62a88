use std::sync::Arc;

use super::kernels::{gelu_grad_scalar, gelu_scalar, matmul, matmul_nt, matmul_tn, softmax_row};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Abs(Var),
    Gelu(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mse(Var, Var),
    GatherRows { table: Var, indices: Arc<Vec<u32>> },
    SoftGather { table: Var, logits: Var, candidates: Arc<Vec<u32>>, ratios: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamically built reverse-mode tape.
///
/// Every op appends a node holding its forward value. Leaves created with
/// [`Tape::param`] are tracked; [`Tape::backward`] accumulates `dloss/dleaf`
/// into their gradient slots until [`Tape::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A tracked leaf; its gradient is available after `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf, `None` for untracked nodes or before `backward`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        self.leaf_grads[v.0].as_ref().map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims2(a)?;
        let (p2, q) = self.dims2(b)?;
        if p != p2 {
            return Err(dim_err(format!("matmul inner extents {p} vs {p2}")));
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), m, p, q);
        let out = Tensor::new(vec![m, q], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(format!("{what}: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_check(&self, x: Var, r: Var) -> Result<usize> {
        let w = self.value(x).last_dim();
        if self.value(r).numel() != w {
            return Err(dim_err(format!("row operand has {} values, expected {w}", self.value(r).numel())));
        }
        Ok(w)
    }

    /// `x + r` with `r` broadcast over every row of the last axis.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let w = self.row_check(x, r)?;
        let rv = self.value(r).data().to_vec();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(idx, &v)| v + rv[idx % w]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, r]);
        Ok(self.push(out, Op::AddRow(x, r), rg))
    }

    /// `x * r` with `r` broadcast over every row of the last axis.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let w = self.row_check(x, r)?;
        let rv = self.value(r).data().to_vec();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(idx, &v)| v * rv[idx % w]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, r]);
        Ok(self.push(out, Op::MulRow(x, r), rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * s).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v + s).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.abs()).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let h = xv.last_dim();
        if h < 2 {
            return Err(dim_err(format!("layer_norm needs a last extent >= 2, got {h}")));
        }
        let rows = xv.outer();
        let mut data = vec![0.0f32; xv.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / h as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / h as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for (o, &v) in data[r * h..(r + 1) * h].iter_mut().zip(row) {
                *o = ((v as f64 - mean) * s) as f32;
            }
            rstd.push(s);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LayerNorm { x, rstd }, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = xv.last_dim();
        let mut data = vec![0.0f32; xv.numel()];
        for r in 0..xv.outer() {
            softmax_row(xv.row(r), &mut data[r * w..(r + 1) * w]);
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if len == 0 || start + len > c {
            return Err(dim_err(format!("column slice {start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err("concat of nothing"))?;
        let (r, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(dim_err(format!("concat rows {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), rg)
    }

    /// Mean over elements of `(a - b)^2` as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let m = self.value(a).mse(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(m as f32), Op::Mse(a, b), rg))
    }

    /// Row lookup: output row `j` is `table[indices[j]]`.
    pub fn gather_rows(&mut self, table: Var, indices: Arc<Vec<u32>>) -> Result<Var> {
        let (k, d) = self.dims2(table)?;
        if indices.is_empty() {
            return Err(dim_err("gather of zero rows"));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices.iter() {
            let i = i as usize;
            if i >= k {
                return Err(dim_err(format!("row index {i} out of {k}")));
            }
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::GatherRows { table, indices }, rg))
    }

    /// Softmax-weighted row lookup.
    ///
    /// `logits` is `m x n`, `candidates` holds `m * n` row indices into
    /// `table` (`k x d`). Output row `j` is `sum_c softmax(logits[j])[c] *
    /// table[candidates[j * n + c]]`, accumulated in `f64`.
    pub fn soft_gather(&mut self, table: Var, logits: Var, candidates: Arc<Vec<u32>>) -> Result<Var> {
        let (k, d) = self.dims2(table)?;
        let (m, n) = self.dims2(logits)?;
        if candidates.len() != m * n {
            return Err(dim_err(format!("{} candidates for a {m}x{n} logit matrix", candidates.len())));
        }
        if let Some(&bad) = candidates.iter().find(|&&c| c as usize >= k) {
            return Err(dim_err(format!("candidate {bad} out of {k}")));
        }
        let lv = self.value(logits).data();
        let mut ratios = vec![0.0f32; m * n];
        for j in 0..m {
            softmax_row(&lv[j * n..(j + 1) * n], &mut ratios[j * n..(j + 1) * n]);
        }
        let tv = self.value(table).data();
        let mut data = vec![0.0f32; m * d];
        let mut acc = vec![0.0f64; d];
        for j in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for c in 0..n {
                let r = ratios[j * n + c] as f64;
                let idx = candidates[j * n + c] as usize;
                for (a, &w) in acc.iter_mut().zip(&tv[idx * d..(idx + 1) * d]) {
                    *a += r * w as f64;
                }
            }
            for (o, &a) in data[j * d..(j + 1) * d].iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
        let out = Tensor::new(vec![m, d], data)?;
        let rg = self.rg(&[table, logits]);
        Ok(self.push(out, Op::SoftGather { table, logits, candidates, ratios }, rg))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with(loss, &Tensor::scalar(1.0))
    }

    /// Backpropagates an arbitrary output cotangent `seed` (same shape as `out`).
    pub fn backward_with(&mut self, out: Var, seed: &Tensor) -> Result<()> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::Contract(format!(
                "seed shape {:?} differs from output {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        if !self.nodes[out.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.data().to_vec());
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let slot = self.leaf_grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
                slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, contrib: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        contrib(slot);
    }

    fn propagate(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, p) = av.dims2().expect("2-D");
                let q = bv.last_dim();
                if self.requires_grad(*a) {
                    let ga = matmul_nt(g, bv.data(), m, q, p);
                    self.accumulate(grads, *a, |s| add_into(s, &ga));
                }
                if self.requires_grad(*b) {
                    let gb = matmul_tn(av.data(), g, m, p, q);
                    self.accumulate(grads, *b, |s| add_into(s, &gb));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().expect("2-D");
                self.accumulate(grads, *x, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) | Op::AddScalar(x) => self.accumulate(grads, *x, |s| add_into(s, g)),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, v)| *s -= v));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |s| {
                    for ((s, &gv), &o) in s.iter_mut().zip(g).zip(bv) {
                        *s += gv * o;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((s, &gv), &o) in s.iter_mut().zip(g).zip(av) {
                        *s += gv * o;
                    }
                });
            }
            Op::AddRow(x, r) => {
                let w = y.last_dim();
                self.accumulate(grads, *x, |s| add_into(s, g));
                self.accumulate(grads, *r, |s| {
                    let cols = column_sums(g, w, |_, gv| gv as f64);
                    add_into(s, &cols);
                });
            }
            Op::MulRow(x, r) => {
                let w = y.last_dim();
                let xv = self.value(*x).data();
                let rv = self.value(*r).data();
                self.accumulate(grads, *x, |s| {
                    for (idx, (s, &gv)) in s.iter_mut().zip(g).enumerate() {
                        *s += gv * rv[idx % w];
                    }
                });
                self.accumulate(grads, *r, |s| {
                    let cols = column_sums(g, w, |idx, gv| gv as f64 * xv[idx] as f64);
                    add_into(s, &cols);
                });
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, |s| s.iter_mut().zip(g).for_each(|(s, v)| *s += k * v)),
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for ((s, &gv), &v) in s.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *s += gv;
                        } else if v < 0.0 {
                            *s -= gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for ((s, &gv), &v) in s.iter_mut().zip(g).zip(xv) {
                        *s += (gv as f64 * gelu_grad_scalar(v)) as f32;
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let h = y.last_dim();
                self.accumulate(grads, *x, |s| {
                    for (r, &sd) in rstd.iter().enumerate() {
                        let yr = &y.data()[r * h..(r + 1) * h];
                        let gr = &g[r * h..(r + 1) * h];
                        let mg = gr.iter().map(|&v| v as f64).sum::<f64>() / h as f64;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / h as f64;
                        for ((s, &gv), &yv) in s[r * h..(r + 1) * h].iter_mut().zip(gr).zip(yr) {
                            *s += (sd * (gv as f64 - mg - yv as f64 * mgy)) as f32;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let w = y.last_dim();
                self.accumulate(grads, *x, |s| {
                    for r in 0..y.outer() {
                        let yr = &y.data()[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum();
                        for ((s, &gv), &yv) in s[r * w..(r + 1) * w].iter_mut().zip(gr).zip(yr) {
                            *s += (yv as f64 * (gv as f64 - dot)) as f32;
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, len) = y.dims2().expect("2-D");
                let c = self.value(*x).last_dim();
                self.accumulate(grads, *x, |s| {
                    for i in 0..r {
                        add_into(&mut s[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = y.dims2().expect("2-D");
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    self.accumulate(grads, *p, |s| {
                        for i in 0..r {
                            add_into(&mut s[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |s| s.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = 2.0 * g[0] as f64 / av.len() as f64;
                let diff: Vec<f32> = av.iter().zip(bv).map(|(&x, &z)| (k * (x as f64 - z as f64)) as f32).collect();
                self.accumulate(grads, *a, |s| add_into(s, &diff));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(&diff).for_each(|(s, v)| *s -= v));
            }
            Op::GatherRows { table, indices } => {
                let d = y.last_dim();
                self.accumulate(grads, *table, |s| {
                    for (j, &i) in indices.iter().enumerate() {
                        let i = i as usize;
                        add_into(&mut s[i * d..(i + 1) * d], &g[j * d..(j + 1) * d]);
                    }
                });
            }
            Op::SoftGather { table, logits, candidates, ratios } => {
                let d = y.last_dim();
                let n = self.value(*logits).last_dim();
                let m = y.outer();
                if self.requires_grad(*table) {
                    self.accumulate(grads, *table, |s| {
                        for j in 0..m {
                            let gj = &g[j * d..(j + 1) * d];
                            for c in 0..n {
                                let r = ratios[j * n + c];
                                let idx = candidates[j * n + c] as usize;
                                for (s, &gv) in s[idx * d..(idx + 1) * d].iter_mut().zip(gj) {
                                    *s += r * gv;
                                }
                            }
                        }
                    });
                }
                if self.requires_grad(*logits) {
                    let tv = self.value(*table).data();
                    self.accumulate(grads, *logits, |s| {
                        let mut dr = vec![0.0f64; n];
                        for j in 0..m {
                            let gj = &g[j * d..(j + 1) * d];
                            for (c, drc) in dr.iter_mut().enumerate() {
                                let idx = candidates[j * n + c] as usize;
                                *drc = gj
                                    .iter()
                                    .zip(&tv[idx * d..(idx + 1) * d])
                                    .map(|(&a, &b)| a as f64 * b as f64)
                                    .sum();
                            }
                            let rj = &ratios[j * n..(j + 1) * n];
                            let dot: f64 = rj.iter().zip(&dr).map(|(&r, &v)| r as f64 * v).sum();
                            for c in 0..n {
                                s[j * n + c] += (rj[c] as f64 * (dr[c] - dot)) as f32;
                            }
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn column_sums(g: &[f32], w: usize, f: impl Fn(usize, f32) -> f64) -> Vec<f32> {
    let mut acc = vec![0.0f64; w];
    for (idx, &gv) in g.iter().enumerate() {
        acc[idx % w] += f(idx, gv);
    }
    acc.into_iter().map(|v| v as f32).collect()
}
