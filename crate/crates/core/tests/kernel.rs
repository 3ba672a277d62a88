use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqcal_core::kernel::{dequantize_matmul, fused_matmul, fused_matmul_traced, random_packed_layer};
use vqcal_core::vq::LayerShape;
use vqcal_core::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn fused_matches_dequantized(
        seed in any::<u64>(),
        o in 1usize..48,
        blocks in 1usize..24,
        d in prop::sample::select(vec![1usize, 2, 4]),
        k in prop::sample::select(vec![4usize, 64, 256, 4096]),
        q in 1usize..6,
    ) {
        let shape = LayerShape::new(o, blocks * d, d, k).unwrap();
        let layer = random_packed_layer(shape, seed).unwrap();
        let x = Tensor::randn(&[blocks * d, q], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let (fused, traffic) = fused_matmul_traced(&layer, &x).unwrap();
        let naive = dequantize_matmul(&layer, &x).unwrap();
        let scale = naive.max_abs().max(f32::MIN_POSITIVE) as f64;
        for (a, b) in fused.data().iter().zip(naive.data()) {
            prop_assert!(((a - b).abs() as f64) / scale <= 1e-6, "{a} vs {b}");
        }
        prop_assert_eq!(traffic.total(), layer.weight_bytes());
        prop_assert_eq!(traffic.assignment_bytes, layer.packed.payload.len() as u64);
        prop_assert_eq!(fused, fused_matmul(&layer, &x).unwrap());
    }
}
