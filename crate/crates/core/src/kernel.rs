//! Fused lookup matmul over packed assignments.
//!
//! The weight matrix is never materialized: each output row streams its packed
//! indices, looks the codewords up in a local copy of the codebook, and
//! accumulates codeword-by-activation partial dot products in `f64`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::{matmul, Tensor};
use crate::vq::{pack, reconstruct_hard, unpack, Assignments, BitReader, Codebook, LayerShape, PackedAssignments};

#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    pub shape: LayerShape,
    pub codebook: Codebook,
    pub packed: PackedAssignments,
    /// One bias per output channel.
    pub bias: Vec<f32>,
}

impl PackedLayer {
    pub fn new(shape: LayerShape, codebook: Codebook, assignments: &Assignments, bias: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if codebook.k() != shape.k || codebook.d() != shape.d || bias.len() != shape.o {
            return Err(dim_err(format!(
                "codebook {}x{} / bias {} inconsistent with {shape:?}",
                codebook.k(),
                codebook.d(),
                bias.len()
            )));
        }
        if assignments.len() != shape.subvector_count() {
            return Err(dim_err("assignment count does not match the layer shape"));
        }
        Ok(Self { shape, codebook, packed: pack(assignments, shape.k)?, bias })
    }

    /// Bytes of weight state the fused path reads per full pass.
    pub fn weight_bytes(&self) -> u64 {
        (self.packed.payload.len() + self.codebook.words().len() * 4) as u64
    }
}

/// Weight bytes fetched by one fused pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightTraffic {
    pub codebook_bytes: u64,
    pub assignment_bytes: u64,
}

impl WeightTraffic {
    pub fn total(&self) -> u64 {
        self.codebook_bytes + self.assignment_bytes
    }
}

fn check_input(layer: &PackedLayer, x: &Tensor) -> Result<usize> {
    let (rows, q) = x.dims2()?;
    if rows != layer.shape.i {
        return Err(dim_err(format!("input has {rows} rows, layer expects {}", layer.shape.i)));
    }
    if layer.packed.payload.len()
        != PackedAssignments::payload_len(layer.shape.subvector_count(), layer.shape.index_bits())
    {
        return Err(dim_err("packed payload length does not match the layer shape"));
    }
    Ok(q)
}

/// `C[A] * x + bias` without materializing `C[A]`. `x` is `i x q`.
pub fn fused_matmul(layer: &PackedLayer, x: &Tensor) -> Result<Tensor> {
    fused_matmul_traced(layer, x).map(|(t, _)| t)
}

/// [`fused_matmul`] plus a count of the weight bytes it fetched.
pub fn fused_matmul_traced(layer: &PackedLayer, x: &Tensor) -> Result<(Tensor, WeightTraffic)> {
    let q = check_input(layer, x)?;
    let LayerShape { o, i, d, .. } = layer.shape;
    let mut traffic = WeightTraffic::default();

    // local working set: k * d * 4 bytes
    let words: Vec<f32> = layer.codebook.words().to_vec();
    traffic.codebook_bytes = (words.len() * 4) as u64;

    let xs = x.data();
    let mut reader = BitReader::new(&layer.packed.payload, layer.shape.index_bits());
    let mut out = vec![0.0f32; o * q];
    let mut acc = vec![0.0f64; q];
    for (r, out_row) in out.chunks_exact_mut(q).enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for j in 0..i / d {
            let idx = reader.next_index() as usize;
            let word = &words[idx * d..(idx + 1) * d];
            for (e, &w) in word.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let w = w as f64;
                let xrow = &xs[(j * d + e) * q..(j * d + e + 1) * q];
                for (a, &xv) in acc.iter_mut().zip(xrow) {
                    *a += w * xv as f64;
                }
            }
        }
        let b = layer.bias[r] as f64;
        for (o, &a) in out_row.iter_mut().zip(&acc) {
            *o = (a + b) as f32;
        }
    }
    traffic.assignment_bytes = reader.bytes_read();
    Ok((Tensor::new(vec![o, q], out)?, traffic))
}

/// Reference path: unpack, reconstruct the dense weight, multiply, add bias.
pub fn dequantize_matmul(layer: &PackedLayer, x: &Tensor) -> Result<Tensor> {
    let q = check_input(layer, x)?;
    let LayerShape { o, i, k, .. } = layer.shape;
    let a = unpack(&layer.packed, layer.shape.subvector_count(), k)?;
    let w = reconstruct_hard(&layer.codebook, &a, o, i)?;
    let mut y = matmul(w.data(), x.data(), o, i, q);
    for (r, row) in y.chunks_exact_mut(q).enumerate() {
        row.iter_mut().for_each(|v| *v += layer.bias[r]);
    }
    Tensor::new(vec![o, q], y)
}

/// One benchmark configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCase {
    pub o: usize,
    pub i: usize,
    pub d: usize,
    pub k: usize,
    /// Activation columns.
    pub q: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub case: BenchCase,
    pub repetitions: usize,
    pub fused_mean_ns: f64,
    pub dequant_mean_ns: f64,
    /// Packed assignments plus codebook.
    pub fused_weight_bytes: u64,
    /// Dense `f32` weight.
    pub dense_weight_bytes: u64,
    pub fused_bytes_per_output: f64,
    pub dense_bytes_per_output: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect()
    }
}

/// Random layer of the given shape with uniformly random assignments.
pub fn random_packed_layer(shape: LayerShape, seed: u64) -> Result<PackedLayer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cb = Tensor::randn(&[shape.k, shape.d], 0.1, &mut rng);
    let idx: Vec<u32> =
        (0..shape.subvector_count()).map(|_| rand::Rng::random_range(&mut rng, 0..shape.k as u32)).collect();
    let bias = Tensor::randn(&[shape.o], 0.02, &mut rng).into_data();
    PackedLayer::new(shape, Codebook::from_tensor(&cb)?, &Assignments(idx), bias)
}

/// Times the fused and dequantize-then-multiply paths. `repetitions == 0` yields an empty report.
pub fn bench(cases: &[BenchCase], repetitions: usize) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    if repetitions == 0 {
        return Ok(report);
    }
    for (n, &case) in cases.iter().enumerate() {
        let shape = LayerShape::new(case.o, case.i, case.d, case.k)?;
        let layer = random_packed_layer(shape, n as u64)?;
        let x = Tensor::randn(&[case.i, case.q], 1.0, &mut ChaCha8Rng::seed_from_u64(1000 + n as u64));
        let mut fused_ns = 0u128;
        let mut dequant_ns = 0u128;
        for _ in 0..repetitions {
            let t0 = Instant::now();
            std::hint::black_box(fused_matmul(&layer, &x)?);
            fused_ns += t0.elapsed().as_nanos();
            let t0 = Instant::now();
            std::hint::black_box(dequantize_matmul(&layer, &x)?);
            dequant_ns += t0.elapsed().as_nanos();
        }
        let outputs = (case.o * case.q) as f64;
        let dense = (case.o * case.i * 4) as u64;
        report.records.push(BenchRecord {
            case,
            repetitions,
            fused_mean_ns: fused_ns as f64 / repetitions as f64,
            dequant_mean_ns: dequant_ns as f64 / repetitions as f64,
            fused_weight_bytes: layer.weight_bytes(),
            dense_weight_bytes: dense,
            fused_bytes_per_output: layer.weight_bytes() as f64 / outputs,
            dense_bytes_per_output: dense as f64 / outputs,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_bias() {
        let layer = random_packed_layer(LayerShape::new(6, 8, 4, 16).unwrap(), 1).unwrap();
        let y = fused_matmul(&layer, &Tensor::zeros(&[8, 3])).unwrap();
        for r in 0..6 {
            assert_eq!(&y.data()[r * 3..(r + 1) * 3], &[layer.bias[r]; 3]);
        }
    }

    #[test]
    fn scalar_codebook_matches_dense_exactly() {
        // d = 1 with the distinct weight values as codewords
        let w = [0.5f32, -1.0, 0.25, 0.5, 0.25, -1.0];
        let cb = Codebook::new(4, 1, vec![0.5, -1.0, 0.25, 0.0]).unwrap();
        let a = Assignments(vec![0, 1, 2, 0, 2, 1]);
        let layer = PackedLayer::new(LayerShape::new(2, 3, 1, 4).unwrap(), cb, &a, vec![0.0, 0.0]).unwrap();
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 4.0]]);
        let dense = Tensor::new(vec![2, 2], matmul(&w, x.data(), 2, 3, 2)).unwrap();
        assert_eq!(fused_matmul(&layer, &x).unwrap(), dense);
    }

    #[test]
    fn traffic_is_packed_plus_codebook() {
        let layer = random_packed_layer(LayerShape::new(16, 24, 4, 64).unwrap(), 3).unwrap();
        let (_, traffic) = fused_matmul_traced(&layer, &Tensor::full(&[24, 2], 1.0)).unwrap();
        assert_eq!(traffic.assignment_bytes, layer.packed.payload.len() as u64);
        assert_eq!(traffic.codebook_bytes, 64 * 4 * 4);
        assert_eq!(traffic.total(), layer.weight_bytes());
    }

    #[test]
    fn wrong_input_rows() {
        let layer = random_packed_layer(LayerShape::new(4, 8, 2, 4).unwrap(), 0).unwrap();
        assert!(fused_matmul(&layer, &Tensor::zeros(&[6, 1])).is_err());
    }

    #[test]
    fn empty_bench() {
        let case = BenchCase { o: 8, i: 8, d: 4, k: 16, q: 1 };
        assert!(bench(&[case], 0).unwrap().records.is_empty());
        let r = bench(&[case, case], 2).unwrap();
        assert_eq!(r.records.len(), 2);
        assert_eq!(r.to_jsonl().lines().count(), 2);
    }
}
