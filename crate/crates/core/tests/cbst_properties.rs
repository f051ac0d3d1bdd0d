mod oracles;

use flowadapt_core::cbst::{
    compute_spatial_prior, determine_thresholds, generate_pseudolabels, selection_audit,
    self_train, ClassSelection, ClassThresholds, SelfTrainConfig, SelfTrainData, SpatialPrior,
};
use flowadapt_core::segmodel::init_model;
use flowadapt_core::{FeatureConfig, Image, LabelMap, ProbMap, RoundSchedule, IGNORE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn audit(
    pm: &ProbMap,
    th: &ClassThresholds,
    lm: &LabelMap,
    prior: Option<&SpatialPrior>,
) -> Vec<ClassSelection> {
    selection_audit(pm, th, lm, prior).unwrap()
}

/// Thresholds by an independent pool-sort-index pass.
fn threshold_oracle(maps: &[ProbMap], p: f64) -> Vec<f64> {
    let k = maps[0].classes();
    let mut pools: Vec<Vec<f64>> = vec![vec![]; k];
    for m in maps {
        for i in 0..m.width() * m.height() {
            let probs = m.probs(i);
            let mut c = 0;
            for j in 0..k {
                if probs[j] > probs[c] {
                    c = j;
                }
            }
            pools[c].push(probs[c] as f64);
        }
    }
    pools
        .into_iter()
        .map(|mut v| {
            if v.is_empty() {
                return f64::INFINITY;
            }
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v[(p * v.len() as f64).ceil() as usize - 1]
        })
        .collect()
}

fn probmap_strategy() -> impl Strategy<Value = ProbMap> {
    (any::<u64>(), 1usize..24, 1usize..24, 2usize..7).prop_map(|(seed, w, h, k)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        oracles::random_probmap(&mut rng, w, h, k)
    })
}

fn random_prior(rng: &mut impl Rng, w: usize, h: usize, k: usize) -> SpatialPrior {
    let maps: Vec<LabelMap> = (0..3)
        .map(|_| oracles::random_labels(rng, w, h, k as u8, 0.1))
        .collect();
    compute_spatial_prior(&maps, (w, h), k, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn thresholds_match_sort_and_index(pm in probmap_strategy(), p in 0.01f64..=1.0) {
        let th = determine_thresholds(std::slice::from_ref(&pm), p, None).unwrap();
        prop_assert_eq!(th.lambda, threshold_oracle(std::slice::from_ref(&pm), p));
    }

    #[test]
    fn admitted_fraction_within_quantization(pm in probmap_strategy(), use_prior in any::<bool>(), seed in any::<u64>()) {
        let prior = use_prior.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_prior(&mut rng, pm.width(), pm.height(), pm.classes())
        });
        for p in [0.2, 0.5, 1.0] {
            let th = determine_thresholds(std::slice::from_ref(&pm), p, prior.as_ref()).unwrap();
            let lm = generate_pseudolabels(&pm, &th, prior.as_ref()).unwrap();
            for (c, a) in audit(&pm, &th, &lm, prior.as_ref()).iter().enumerate() {
                if a.pool == 0 {
                    prop_assert!(th.lambda[c].is_infinite());
                    continue;
                }
                let f = a.passed_fraction().unwrap();
                let slack = 1.0 / a.pool as f64 + 1e-12;
                prop_assert!((f - p).abs() <= slack, "class {} p {} fraction {} pool {}", c, p, f, a.pool);
                prop_assert!(a.selected >= a.passed);
            }
        }
    }

    #[test]
    fn selections_grow_with_p(pm in probmap_strategy(), use_prior in any::<bool>(), seed in any::<u64>()) {
        let prior = use_prior.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_prior(&mut rng, pm.width(), pm.height(), pm.classes())
        });
        let ps = [0.05, 0.2, 0.35, 0.5, 0.75, 1.0];
        let mut prev: Option<(ClassThresholds, LabelMap)> = None;
        for p in ps {
            let th = determine_thresholds(std::slice::from_ref(&pm), p, prior.as_ref()).unwrap();
            let lm = generate_pseudolabels(&pm, &th, prior.as_ref()).unwrap();
            if let Some((pth, plm)) = &prev {
                for (a, b) in th.lambda.iter().zip(&pth.lambda) {
                    prop_assert!(a <= b);
                }
                for (now, before) in lm.data().iter().zip(plm.data()) {
                    prop_assert!(*before == IGNORE || *now != IGNORE);
                }
            }
            prev = Some((th, lm));
        }
    }

    #[test]
    fn scaling_scores_keeps_selection(pm in probmap_strategy(), p in 0.05f64..=1.0, scale_pow in -3i32..4) {
        // powers of two scale floating-point values exactly
        let s = 2f32.powi(scale_pow);
        let scaled = ProbMap::from_vec(pm.width(), pm.height(), pm.classes(), pm.data().iter().map(|v| v * s).collect()).unwrap();
        let a = determine_thresholds(std::slice::from_ref(&pm), p, None).unwrap();
        let b = determine_thresholds(std::slice::from_ref(&scaled), p, None).unwrap();
        for (x, y) in a.lambda.iter().zip(&b.lambda) {
            prop_assert!(x.is_infinite() && y.is_infinite() || *y == x * s as f64);
        }
        prop_assert_eq!(
            generate_pseudolabels(&pm, &a, None).unwrap(),
            generate_pseudolabels(&scaled, &b, None).unwrap()
        );
        prop_assert_eq!(pm.argmax(), scaled.argmax());
    }

    #[test]
    fn sentinel_classes_are_never_emitted(pm in probmap_strategy(), p in 0.05f64..=1.0, drop in 0usize..7) {
        let mut th = determine_thresholds(std::slice::from_ref(&pm), p, None).unwrap();
        let c = drop % pm.classes();
        th.lambda[c] = f64::INFINITY;
        let lm = generate_pseudolabels(&pm, &th, None).unwrap();
        prop_assert!(lm.data().iter().all(|&l| l as usize != c));
    }

    #[test]
    fn prior_is_normalized_and_matches_naive_convolution(seed in any::<u64>(), w in 1usize..12, h in 1usize..12, k in 1usize..5, sigma in 0.3f64..2.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<LabelMap> = (0..3).map(|_| oracles::random_labels(&mut rng, w, h, k as u8, 0.3)).collect();
        let prior = compute_spatial_prior(&maps, (w, h), k, sigma).unwrap();

        let r = ((3.0 * sigma).ceil() as i64).max(1);
        let g: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let gs: f64 = g.iter().sum();
        for y in 0..h {
            for x in 0..w {
                let mut acc = vec![0f64; k];
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let wt = g[(dx + r) as usize] * g[(dy + r) as usize] / (gs * gs);
                        for m in &maps {
                            let l = m.get(sx, sy);
                            if l != IGNORE {
                                acc[l as usize] += wt;
                            }
                        }
                    }
                }
                let total: f64 = acc.iter().sum();
                let got = prior.at(y * w + x);
                if total > 0.0 {
                    let s: f32 = got.iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-5);
                    for c in 0..k {
                        prop_assert!(got[c] >= 0.0);
                        prop_assert!((got[c] as f64 - acc[c] / total).abs() < 1e-5);
                    }
                } else {
                    prop_assert!(got.iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}

#[test]
fn zero_rounds_return_the_start_model() {
    let img = Image::filled(8, 8, 3, 0.5).unwrap();
    let lm = LabelMap::filled(8, 8, 1).unwrap();
    let fc = FeatureConfig::default();
    let model = init_model(fc.len(3), 4, 2, 0).unwrap();
    let data = SelfTrainData {
        source: std::slice::from_ref(&img),
        source_labels: std::slice::from_ref(&lm),
        target: std::slice::from_ref(&img),
        target_eval: None,
    };
    let cfg = SelfTrainConfig {
        schedule: RoundSchedule {
            rounds: 0,
            ..RoundSchedule::default()
        },
        ..SelfTrainConfig::default()
    };
    let (out, reports) = self_train(&data, &model, &fc, &cfg).unwrap();
    assert_eq!(out, model);
    assert!(reports.is_empty());

    let empty = SelfTrainData {
        target: &[],
        ..data
    };
    assert!(self_train(&empty, &model, &fc, &SelfTrainConfig::default()).is_err());
}

#[test]
fn rounds_follow_the_schedule_and_keep_pseudo_labels_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let imgs: Vec<Image> = (0..3)
        .map(|_| Image::from_fn(12, 10, 3, |_, _, _| rng.random_range(-1.0..1.0)).unwrap())
        .collect();
    let labels: Vec<LabelMap> = (0..3)
        .map(|_| oracles::random_labels(&mut rng, 12, 10, 3, 0.0))
        .collect();
    let fc = FeatureConfig::default();
    let model = init_model(fc.len(3), 6, 3, 2).unwrap();
    let data = SelfTrainData {
        source: &imgs,
        source_labels: &labels,
        target: &imgs,
        target_eval: Some(&labels),
    };
    let cfg = SelfTrainConfig {
        source_pixels_per_image: 50,
        ..SelfTrainConfig::default()
    };
    let (_, reports) = self_train(&data, &model, &fc, &cfg).unwrap();
    assert_eq!(reports.len(), 3);
    for (r, rep) in reports.iter().enumerate() {
        assert!((rep.portion - cfg.schedule.portion(r + 1)).abs() < 1e-12);
        assert!(rep.miou.is_some());
        for lm in &rep.pseudo_labels {
            assert!(lm.data().iter().all(|&l| l == IGNORE || l < 3));
        }
    }
}
