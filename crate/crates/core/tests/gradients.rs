use vqcal_core::dit::block_gradcheck;
use vqcal_core::tensor::gradcheck::primitive_suite;

#[test]
fn primitives_across_seeds() {
    for seed in 0..5 {
        for (name, report) in primitive_suite(seed).unwrap() {
            assert!(report.max_rel_err() < 1e-3, "seed {seed}, {name}: {report:?}");
        }
    }
}

#[test]
fn composed_block_across_seeds() {
    for seed in 0..3 {
        for (name, report) in block_gradcheck(seed).unwrap() {
            assert!(report.max_rel_err() < 1e-2, "seed {seed}, {name}: {report:?}");
        }
    }
}
