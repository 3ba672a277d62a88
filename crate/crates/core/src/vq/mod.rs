//! Codebooks, assignments and candidate sets for vector-quantized weights.
//!
//! A weight `W` of shape `o x i` is cut into `o * i / d` row sub-vectors of
//! length `d`, in row-major order: sub-vector `(r, j)` covers
//! `W[r, j*d .. (j+1)*d]`. Because the layout is contiguous, the flat
//! sub-vector list is just `W`'s data viewed as `(o*i/d) x d`.

mod candidates;
mod kmeans;
mod pack;
mod uniform;

pub use candidates::{build_candidates, finalize, reconstruct_soft, reconstruct_weighted, CandidateSet};
pub use kmeans::{kmeans, KMeansParams, KMeansResult};
pub use pack::{pack, unpack, BitReader, PackedAssignments};
pub use uniform::{uniform_quantize, UniformQuantConfig};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Geometry of one quantized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    /// Output channels.
    pub o: usize,
    /// Input channels.
    pub i: usize,
    /// Sub-vector length.
    pub d: usize,
    /// Codebook size.
    pub k: usize,
}

impl LayerShape {
    pub fn new(o: usize, i: usize, d: usize, k: usize) -> Result<Self> {
        let shape = Self { o, i, d, k };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.o == 0 || self.i == 0 || self.d == 0 {
            return Err(Error::Config(format!("degenerate layer shape {self:?}")));
        }
        if !self.i.is_multiple_of(self.d) {
            return Err(Error::Config(format!(
                "sub-vector length {} does not divide {} input channels",
                self.d, self.i
            )));
        }
        if !self.k.is_power_of_two() || !(2..=65536).contains(&self.k) {
            return Err(Error::Config(format!("codebook size {} must be a power of two in [2, 65536]", self.k)));
        }
        Ok(())
    }

    pub fn subvector_count(&self) -> usize {
        self.o * self.i / self.d
    }

    pub fn index_bits(&self) -> u32 {
        self.k.trailing_zeros()
    }
}

/// `k` codewords of length `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    words: Vec<f32>,
}

impl Codebook {
    pub fn new(k: usize, d: usize, words: Vec<f32>) -> Result<Self> {
        if k == 0 || d == 0 || words.len() != k * d {
            return Err(dim_err(format!("codebook {k}x{d} given {} values", words.len())));
        }
        if words.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entry".into()));
        }
        Ok(Self { k, d, words })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn word(&self, idx: usize) -> &[f32] {
        &self.words[idx * self.d..(idx + 1) * self.d]
    }

    pub fn words(&self) -> &[f32] {
        &self.words
    }

    pub fn words_mut(&mut self) -> &mut [f32] {
        &mut self.words
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.k, self.d], self.words.clone()).expect("valid codebook")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (k, d) = t.dims2()?;
        Self::new(k, d, t.data().to_vec())
    }
}

/// One codeword index per sub-vector, row-major sub-vector order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignments(pub Vec<u32>);

impl Assignments {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

/// Flat view of a weight matrix as `count x d` sub-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SubVectors {
    d: usize,
    data: Vec<f32>,
}

impl SubVectors {
    pub fn from_flat(d: usize, data: Vec<f32>) -> Result<Self> {
        if d == 0 || !data.len().is_multiple_of(d) || data.is_empty() {
            return Err(dim_err(format!("{} values cannot form length-{d} sub-vectors", data.len())));
        }
        Ok(Self { d, data })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn get(&self, j: usize) -> &[f32] {
        &self.data[j * self.d..(j + 1) * self.d]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }
}

/// Cuts a 2-D weight into row sub-vectors of length `d`.
pub fn split_subvectors(w: &Tensor, d: usize) -> Result<SubVectors> {
    let (_, i) = w.dims2()?;
    if d == 0 || i % d != 0 {
        return Err(dim_err(format!("sub-vector length {d} does not divide {i} columns")));
    }
    SubVectors::from_flat(d, w.data().to_vec())
}

/// Inverse of [`split_subvectors`].
pub fn join_subvectors(sv: &SubVectors, o: usize, i: usize) -> Result<Tensor> {
    Tensor::new(vec![o, i], sv.as_flat().to_vec())
}

/// `W_hat` with sub-vector `j` replaced by `codebook[assignments[j]]`.
pub fn reconstruct_hard(cb: &Codebook, a: &Assignments, o: usize, i: usize) -> Result<Tensor> {
    if o * i != a.len() * cb.d() {
        return Err(dim_err(format!("{} assignments of length {} cannot fill {o}x{i}", a.len(), cb.d())));
    }
    let mut data = Vec::with_capacity(o * i);
    for &idx in a.as_slice() {
        if idx as usize >= cb.k() {
            return Err(dim_err(format!("assignment {idx} out of {}", cb.k())));
        }
        data.extend_from_slice(cb.word(idx as usize));
    }
    Tensor::new(vec![o, i], data)
}

/// Squared reconstruction error `||W - C[A]||^2`, accumulated in `f64`.
pub fn reconstruction_sse(sv: &SubVectors, cb: &Codebook, a: &Assignments) -> f64 {
    sv.iter().zip(a.as_slice()).map(|(w, &idx)| squared_distance(w, cb.word(idx as usize))).sum()
}

pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Bits needed to store one quantized layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub assignment_bits: u64,
    pub codebook_bits: u64,
    /// `log2(k) / d`, excluding the codebook.
    pub effective_bits_per_weight: f64,
}

impl StorageReport {
    pub fn assignment_bytes(&self) -> u64 {
        self.assignment_bits.div_ceil(8)
    }

    pub fn codebook_bytes(&self) -> u64 {
        self.codebook_bits / 8
    }
}

pub fn storage_report(shape: &LayerShape) -> StorageReport {
    let bits = shape.index_bits() as u64;
    StorageReport {
        assignment_bits: shape.subvector_count() as u64 * bits,
        codebook_bits: (shape.k * shape.d * 32) as u64,
        effective_bits_per_weight: bits as f64 / shape.d as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_slices_rows() {
        let w = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]);
        let sv = split_subvectors(&w, 2).unwrap();
        let parts: Vec<&[f32]> = sv.iter().collect();
        assert_eq!(parts, vec![&[1.0, 2.0][..], &[3.0, 4.0][..]]);

        let w = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]);
        let sv = split_subvectors(&w, 4).unwrap();
        assert_eq!(sv.count(), 2);
        assert_eq!(sv.get(1), w.row(1));
        assert!(split_subvectors(&w, 3).is_err());
    }

    #[test]
    fn layer_shape_invariants() {
        assert!(LayerShape::new(4, 8, 4, 256).is_ok());
        assert!(LayerShape::new(4, 6, 4, 256).is_err());
        assert!(LayerShape::new(4, 8, 4, 100).is_err());
        assert!(LayerShape::new(4, 8, 4, 1).is_err());
        assert!(LayerShape::new(4, 8, 4, 131072).is_err());
        assert_eq!(LayerShape::new(4, 8, 4, 16).unwrap().subvector_count(), 8);
    }

    #[test]
    fn hard_reconstruction_with_zero_assignments() {
        let cb = Codebook::new(2, 2, vec![0.5, -1.0, 3.0, 3.0]).unwrap();
        let w = reconstruct_hard(&cb, &Assignments(vec![0; 4]), 2, 4).unwrap();
        for sv in w.data().chunks(2) {
            assert_eq!(sv, cb.word(0));
        }
        assert!(reconstruct_hard(&cb, &Assignments(vec![2; 4]), 2, 4).is_err());
    }

    #[test]
    fn storage_of_the_large_projection() {
        let r = storage_report(&LayerShape::new(1152, 4608, 4, 256).unwrap());
        assert_eq!(r.assignment_bits, 10_616_832);
        assert_eq!(r.assignment_bytes(), 1_327_104);
        assert_eq!(r.codebook_bits, 32_768);
        assert_eq!(r.effective_bits_per_weight, 2.0);
    }

    #[test]
    fn storage_presets() {
        let three = storage_report(&LayerShape::new(8, 8, 2, 64).unwrap());
        assert_eq!(three.effective_bits_per_weight, 3.0);
        let two = storage_report(&LayerShape::new(8, 12, 6, 4096).unwrap());
        assert_eq!(two.effective_bits_per_weight, 2.0);
    }
}
