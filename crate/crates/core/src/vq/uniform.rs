use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Symmetric per-tensor scalar quantizer: `W ~ s * W_int`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformQuantConfig {
    pub bits: u32,
    pub scale: f32,
}

/// Rounds every weight to the nearest of `2^(b-1) - 1` symmetric levels on each side of zero.
///
/// An all-zero tensor has no defined scale; it reconstructs to zero with `scale = 1`.
pub fn uniform_quantize(w: &Tensor, bits: u32) -> Result<(Tensor, UniformQuantConfig)> {
    if ![2, 3, 4, 8].contains(&bits) {
        return Err(Error::Config(format!("uniform bit-width {bits} not in {{2, 3, 4, 8}}")));
    }
    let qmax = ((1u32 << (bits - 1)) - 1) as f32;
    let max = w.max_abs();
    if max == 0.0 {
        return Ok((Tensor::zeros(w.shape()), UniformQuantConfig { bits, scale: 1.0 }));
    }
    let scale = max / qmax;
    let data = w.data().iter().map(|&v| (v / scale).round().clamp(-qmax, qmax) * scale).collect();
    Ok((Tensor::new(w.shape().to_vec(), data)?, UniformQuantConfig { bits, scale }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uq(vals: &[f32], bits: u32) -> (Vec<f32>, f32) {
        let w = Tensor::new(vec![vals.len()], vals.to_vec()).unwrap();
        let (q, cfg) = uniform_quantize(&w, bits).unwrap();
        (q.into_data(), cfg.scale)
    }

    #[test]
    fn ternary_levels_are_exact() {
        assert_eq!(uq(&[-1.0, 0.0, 1.0], 2), (vec![-1.0, 0.0, 1.0], 1.0));
    }

    #[test]
    fn small_values_round_to_zero() {
        assert_eq!(uq(&[1.0, 0.3], 2), (vec![1.0, 0.0], 1.0));
    }

    #[test]
    fn single_value_is_its_own_scale() {
        assert_eq!(uq(&[0.4], 2), (vec![0.4], 0.4));
    }

    #[test]
    fn zero_tensor_has_unit_scale() {
        assert_eq!(uq(&[0.0, 0.0], 3), (vec![0.0, 0.0], 1.0));
    }

    #[test]
    fn unsupported_width() {
        let w = Tensor::zeros(&[2]);
        assert!(uniform_quantize(&w, 5).is_err());
        assert!(uniform_quantize(&w, 1).is_err());
    }
}
