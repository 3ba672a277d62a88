use proptest::prelude::*;
use vqcal_core::calib::loss_lr;

fn pairs(r: &[f32]) -> Vec<f32> {
    r.iter().flat_map(|&p| [p, 1.0 - p]).collect()
}

proptest! {
    #[test]
    fn ratio_loss_is_bounded(r in prop::collection::vec(0.0f32..=1.0, 1..64)) {
        let lr = loss_lr(&pairs(&r), 2);
        prop_assert!((0.0..=2.0).contains(&lr));
    }

    #[test]
    fn ratio_loss_ignores_order(mut r in prop::collection::vec(0.0f32..=1.0, 2..64)) {
        let before = loss_lr(&pairs(&r), 2);
        r.reverse();
        prop_assert!((loss_lr(&pairs(&r), 2) - before).abs() < 1e-12);
    }

    #[test]
    fn sharpening_a_ratio_lowers_the_loss(mut r in prop::collection::vec(0.0f32..=1.0, 1..64), j in any::<prop::sample::Index>()) {
        let j = j.index(r.len());
        let before = loss_lr(&pairs(&r), 2);
        r[j] = if r[j] >= 0.5 { 1.0 } else { 0.0 };
        prop_assert!(loss_lr(&pairs(&r), 2) <= before);
    }

    #[test]
    fn one_hot_ratios_have_zero_loss(bits in prop::collection::vec(any::<bool>(), 1..64)) {
        let r: Vec<f32> = bits.iter().map(|&b| b as u8 as f32).collect();
        prop_assert_eq!(loss_lr(&pairs(&r), 2), 0.0);
    }
}
