mod oracles;

use flowadapt_core::fusion::extract_features;
use flowadapt_core::segmodel::{accuracy, init_model, predict_probmap, train, Dataset, Model};
use flowadapt_core::{FeatureConfig, Image, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_set(rng: &mut impl Rng, n: usize, dim: usize, classes: u8) -> Dataset {
    let mut set = Dataset::new(dim);
    for _ in 0..n {
        let f: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        set.push(&f, rng.random_range(0..classes)).unwrap();
    }
    set
}

#[test]
fn gradient_check_every_tensor() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (seed, l2) in [(1u64, 0.0), (2, 1e-2)] {
        let model = init_model(5, 6, 3, seed).unwrap();
        let data = random_set(&mut rng, 12, 5, 3);
        let batch: Vec<usize> = (0..12).collect();
        let worst = oracles::gradient_check(&model, &data, &batch, l2, 1e-4);
        for (name, w) in ["w1", "b1", "w2", "b2"].iter().zip(worst) {
            assert!(w < 1e-3, "{name}: relative error {w} (l2 {l2})");
        }
    }
}

#[test]
fn separable_toy_is_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = oracles::separable_toy(&mut rng, 4, 100, 6);
    let model = init_model(6, 16, 4, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        seed: 9,
        ..TrainConfig::default()
    };
    let (trained, trace) = train(&model, &data, &cfg).unwrap();
    let acc = accuracy(&trained, &data).unwrap();
    assert!(acc >= 0.99, "training accuracy {acc}");
    for w in trace[..5].windows(2) {
        assert!(w[1] <= w[0], "loss rose early: {trace:?}");
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = random_set(&mut rng, 30, 4, 2);
    let model = init_model(4, 5, 2, 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 3,
        ..TrainConfig::default()
    };
    assert_eq!(train(&model, &data, &cfg).unwrap().0, model);
}

#[test]
fn probmap_matches_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Image::from_fn(9, 7, 4, |_, _, _| rng.random_range(-2.0..2.0)).unwrap();
    let cfg = FeatureConfig::default();
    let model = init_model(cfg.len(4), 8, 5, 11).unwrap();
    let pm = predict_probmap(&model, &img, &cfg).unwrap();
    for y in 0..7 {
        for x in 0..9 {
            let want = model
                .forward(&extract_features(&img, x, y, &cfg).unwrap())
                .unwrap();
            assert_eq!(pm.probs(y * 9 + x), want.as_slice());
        }
    }
}

#[test]
fn training_is_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = random_set(&mut rng, 200, 3, 3);
    let model = init_model(3, 4, 3, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    assert_eq!(
        train(&model, &data, &cfg).unwrap(),
        train(&model, &data, &cfg).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), in_dim in 1usize..8, hidden in 1usize..8, k in 1usize..6) {
        let m = init_model(in_dim, hidden, k, seed).unwrap();
        let back = Model::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn forward_is_a_distribution(seed in any::<u64>(), x in prop::collection::vec(-100.0f32..100.0, 4)) {
        let m = init_model(4, 6, 3, seed).unwrap();
        let p = m.forward(&x).unwrap();
        let s: f32 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-5);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
