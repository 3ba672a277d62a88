use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqcal_core::calib::{calibrate, init_layers, CalibConfig, QuantPlan, TrajectoryCache};
use vqcal_core::dit::{DiTConfig, DitModel};
use vqcal_core::vq::{kmeans, split_subvectors, KMeansParams};
use vqcal_core::Tensor;

fn kmeans_layer(c: &mut Criterion) {
    let w = Tensor::randn(&[256, 256], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    for bits in [2u32, 3] {
        let plan = QuantPlan::preset(bits).unwrap();
        let sv = split_subvectors(&w, plan.d).unwrap();
        let p = KMeansParams { seed: 0, max_iters: 20, tol: 0.0 };
        c.bench_function(&format!("kmeans_256x256_{bits}bit"), |b| b.iter(|| kmeans(&sv, plan.k, &p).unwrap()));
    }
}

fn calibration_iterations(c: &mut Criterion) {
    let model = DitModel::random(DiTConfig::default(), 0).unwrap();
    let cache = TrajectoryCache::generate(&model, 8, 1, 1.0).unwrap();
    let layers = init_layers(&model, QuantPlan::preset(2).unwrap(), 2, &KMeansParams::default()).unwrap();
    let cfg = CalibConfig { iters: 5, batch: 4, ..Default::default() };
    let mut g = c.benchmark_group("calibration");
    g.sample_size(10);
    g.bench_function("toy_5_iters_batch_4", |b| b.iter(|| calibrate(&model, layers.clone(), &cfg, &cache).unwrap()));
    g.finish();
}

criterion_group!(benches, kmeans_layer, calibration_iterations);
criterion_main!(benches);
