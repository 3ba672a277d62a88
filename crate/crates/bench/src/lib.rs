//! Shared benchmark configurations.

use vqcal_core::kernel::BenchCase;

/// Toy-model layer shapes at both presets, a large layer, and single-token decoding.
pub fn kernel_cases() -> Vec<BenchCase> {
    let mut cases = Vec::new();
    for (d, k) in [(4, 256), (2, 64)] {
        cases.push(BenchCase { o: 256, i: 64, d, k, q: 16 });
        cases.push(BenchCase { o: 1152, i: 1152, d, k, q: 16 });
        cases.push(BenchCase { o: 1152, i: 4608, d, k, q: 1 });
    }
    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use vqcal_core::vq::LayerShape;

    #[test]
    fn cases_are_valid_shapes() {
        for c in kernel_cases() {
            LayerShape::new(c.o, c.i, c.d, c.k).unwrap();
        }
    }
}
