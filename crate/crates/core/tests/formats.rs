use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqcal_core::dit::{DiTConfig, DitModel};
use vqcal_core::modelio::{
    model_from_container, model_to_container, parse_container, read_quantized, write_quantized, QuantizedLayer,
    QuantizedModel, TensorContainer,
};
use vqcal_core::vq::{Assignments, Codebook, LayerShape};
use vqcal_core::Tensor;

fn random_container(seed: u64) -> TensorContainer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = TensorContainer::new();
    for j in 0..rng.random_range(0..4) {
        c.metadata.insert(format!("key{j}"), format!("value {}", rng.random::<u32>()));
    }
    for j in 0..rng.random_range(0..6) {
        let rank = rng.random_range(1..4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..5)).collect();
        let numel = shape.iter().product::<usize>();
        if rng.random_bool(0.5) {
            c.insert_f32(&format!("t{j}"), &Tensor::randn(&shape, 2.0, &mut rng)).unwrap();
        } else {
            let values: Vec<f64> = (0..numel).map(|_| rng.random::<f64>() - 0.5).collect();
            c.insert_f64(&format!("t{j}"), &shape, &values).unwrap();
        }
    }
    c
}

fn random_quantized(seed: u64) -> QuantizedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DiTConfig { depth: 1, hidden: 8, heads: 2, tokens: 2, classes: 2, timesteps: 2, ..Default::default() };
    let model = DitModel::random(cfg.clone(), seed).unwrap();
    let quantized = model.quantizable_layers();
    let mut layers = Vec::new();
    let mut passthrough = Vec::new();
    for (name, shape) in model.expected_shapes() {
        if !quantized.contains(&name) {
            passthrough.push((name.clone(), model.param(&name).clone()));
            continue;
        }
        let (o, i) = (shape[0], shape[1]);
        let d = [1usize, 2, 4][rng.random_range(0..3)];
        let k = [2usize, 4, 16, 256][rng.random_range(0..4)];
        let shape = LayerShape::new(o, i, d, k).unwrap();
        let words = Tensor::randn(&[k * d], 1.0, &mut rng).into_data();
        let a = Assignments((0..shape.subvector_count()).map(|_| rng.random_range(0..k as u32)).collect());
        layers.push(QuantizedLayer::new(&name, shape, Codebook::new(k, d, words).unwrap(), &a).unwrap());
    }
    QuantizedModel { config: cfg, layers, passthrough }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn container_roundtrip(seed in any::<u64>()) {
        let c = random_container(seed);
        let bytes = c.to_bytes();
        prop_assert_eq!(&random_container(seed).to_bytes(), &bytes);
        let back = parse_container(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(&back.metadata, &c.metadata);
        for name in c.names() {
            prop_assert_eq!(back.get(name).unwrap(), c.get(name).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quantized_roundtrip(seed in any::<u64>()) {
        let q = random_quantized(seed);
        let bytes = write_quantized(&q).unwrap();
        prop_assert_eq!(&write_quantized(&random_quantized(seed)).unwrap(), &bytes);
        let back = read_quantized(&bytes).unwrap();
        prop_assert_eq!(&back, &q);
        prop_assert_eq!(write_quantized(&back).unwrap(), bytes);
    }

    #[test]
    fn model_roundtrip(seed in any::<u64>()) {
        let cfg = DiTConfig { depth: 1, hidden: 8, heads: 2, tokens: 2, classes: 2, timesteps: 2, ..Default::default() };
        let m = DitModel::random(cfg, seed).unwrap();
        let bytes = model_to_container(&m).to_bytes();
        let back = model_from_container(&parse_container(&bytes).unwrap()).unwrap();
        prop_assert_eq!(model_to_container(&back).to_bytes(), bytes);
    }
}

#[test]
fn truncated_files_are_rejected() {
    let bytes = write_quantized(&random_quantized(1)).unwrap();
    for cut in [0, 3, 15, bytes.len() / 2, bytes.len() - 1] {
        assert!(read_quantized(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let c = random_container(7).to_bytes();
    assert!(parse_container(&c[..c.len() - 1]).is_err());
}
