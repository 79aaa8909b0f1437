//! End-to-end checks of kernel training: the descent must actually tighten a
//! mis-set kernel, stay deterministic under resampling, sit still at a
//! perfect fit, and fail loudly instead of returning garbage.

use depthguide::expansion::{
    expand, loss_and_gradient, train_kernel, ExpansionModel, KernelParams, LossWeights,
    TrainScene, TrainingConfig,
};
use depthguide::field::{
    DenseField, IntensityImage, Representation, SparsePoint, SparseSignalMap,
};

/// Two flat intensity regions with a depth step aligned to the color edge.
/// A kernel that ignores intensity blends depths across the edge; training
/// has to discover that color difference predicts depth difference.
fn split_scene(left: f64, right: f64, flip: bool) -> TrainScene {
    let (h, w) = (9, 12);
    let edge = 6;
    let mut pixels = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            pixels[i * w + j] = if (j < edge) != flip { 0.2 } else { 0.8 };
        }
    }
    let image = IntensityImage::new(h, w, 1, pixels).unwrap();
    let mut target = DenseField::empty(h, w, Representation::DepthMeters);
    for i in 0..h {
        for j in 0..w {
            target.set(i, j, if (j < edge) != flip { left } else { right }).unwrap();
        }
    }
    let points = vec![
        SparsePoint { row: 2, col: 2, value: if flip { right } else { left } },
        SparsePoint { row: 6, col: 3, value: if flip { right } else { left } },
        SparsePoint { row: 2, col: 9, value: if flip { left } else { right } },
        SparsePoint { row: 6, col: 8, value: if flip { left } else { right } },
    ];
    let sparse = SparseSignalMap::new(h, w, Representation::DepthMeters, points).unwrap();
    TrainScene { image, sparse, target }
}

fn dataset() -> Vec<TrainScene> {
    vec![split_scene(5.0, 10.0, false), split_scene(4.0, 9.0, true)]
}

#[test]
fn training_tightens_a_loose_kernel() {
    let scenes = dataset();
    // Wide open intensity tolerance: the init kernel trusts cross-edge cells.
    let init = KernelParams::new(8.0, 2.0, 2.0, false).unwrap();
    // The intensity gradient is damped by 1/beta^3 while beta is loose, so
    // closing it in a reasonable iteration budget needs a coarse step size.
    let cfg = TrainingConfig {
        weights: LossWeights::default(),
        learning_rate: 20.0,
        iterations: 150,
        sample_rate: 1.0,
        seed: 0,
    };
    let (trained, curve) = train_kernel(&scenes, &init, 4, &cfg).unwrap();
    assert_eq!(curve.len(), 151);
    assert_eq!(curve[0].0, 0);
    assert_eq!(curve.last().unwrap().0, 150);

    let eval = |params: &KernelParams| -> f64 {
        scenes
            .iter()
            .map(|s| {
                loss_and_gradient(&s.image, &s.sparse, &s.target, params, 4, &cfg.weights, None)
                    .unwrap()
                    .0
                    .total
            })
            .sum::<f64>()
            / scenes.len() as f64
    };
    let before = eval(&init);
    let after = eval(&trained);
    assert!((before - curve[0].1).abs() < 1e-12);
    assert!(after <= before, "{after} vs {before}");
    assert!(after < 0.3 * before, "training barely moved: {before} -> {after}");

    // The tightened kernel stops bleeding depth across the intensity edge.
    let scene = &scenes[0];
    let model = |p: KernelParams| ExpansionModel::Kernel { params: p, half_size: 4 };
    let (exp_init, _) = expand(&scene.image, &scene.sparse, &model(init), 1.0, 0).unwrap();
    let (exp_trained, _) = expand(&scene.image, &scene.sparse, &model(trained), 1.0, 0).unwrap();
    let err = |exp: &DenseField| -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for (i, j, v) in exp.iter_valid() {
            total += (v - scene.target.get(i, j).unwrap()).abs();
            n += 1;
        }
        total / n as f64
    };
    assert!(err(&exp_trained) < err(&exp_init));
}

#[test]
fn training_runs_are_reproducible() {
    let scenes = dataset();
    let init = KernelParams::new(8.0, 2.0, 2.0, false).unwrap();
    let cfg = TrainingConfig {
        weights: LossWeights::default(),
        learning_rate: 0.3,
        iterations: 12,
        sample_rate: 0.5,
        seed: 7,
    };
    let (params_a, curve_a) = train_kernel(&scenes, &init, 4, &cfg).unwrap();
    let (params_b, curve_b) = train_kernel(&scenes, &init, 4, &cfg).unwrap();
    assert_eq!(params_a, params_b);
    assert_eq!(curve_a, curve_b);

    let reseeded = TrainingConfig { seed: 8, ..cfg };
    let (_, curve_c) = train_kernel(&scenes, &init, 4, &reseeded).unwrap();
    assert_ne!(curve_a, curve_c, "resampling ignored the seed");
}

#[test]
fn perfect_fit_without_confidence_pressure_is_stationary() {
    // Flat image, all sources and targets at the same depth: the fit term is
    // already zero and nothing rewards raising confidence, so with the
    // confidence weight off the descent has nowhere to go.
    let (h, w) = (7, 7);
    let image = IntensityImage::constant(h, w, 1, 0.4).unwrap();
    let mut target = DenseField::empty(h, w, Representation::DepthMeters);
    for i in 0..h {
        for j in 0..w {
            target.set(i, j, 6.0).unwrap();
        }
    }
    let points = vec![
        SparsePoint { row: 1, col: 1, value: 6.0 },
        SparsePoint { row: 5, col: 4, value: 6.0 },
    ];
    let sparse = SparseSignalMap::new(h, w, Representation::DepthMeters, points).unwrap();
    let scenes = vec![TrainScene { image, sparse, target }];
    let init = KernelParams::new(6.0, 0.3, 1.5, false).unwrap();
    let cfg = TrainingConfig {
        weights: LossWeights { fit: 1.0, confidence: 0.0 },
        learning_rate: 1.0,
        iterations: 10,
        sample_rate: 1.0,
        seed: 0,
    };
    let (trained, curve) = train_kernel(&scenes, &init, 3, &cfg).unwrap();
    for &(_, loss) in &curve {
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }
    assert!((trained.alpha - init.alpha).abs() < 1e-8);
    assert!((trained.beta - init.beta).abs() < 1e-8);
    assert!((trained.bias - init.bias).abs() < 1e-8);
}

#[test]
fn extreme_learning_rate_never_returns_worse_than_init() {
    // An absurd step size saturates the sigmoid rather than diverging; the
    // best-so-far tracking must still hand back finite parameters that score
    // no worse than the starting point, or fail with a diagnosis.
    let scenes = dataset();
    let init = KernelParams::new(8.0, 2.0, 2.0, false).unwrap();
    let cfg = TrainingConfig {
        weights: LossWeights::default(),
        learning_rate: 1e280,
        iterations: 4,
        sample_rate: 1.0,
        seed: 0,
    };
    match train_kernel(&scenes, &init, 4, &cfg) {
        Ok((params, curve)) => {
            assert!(params.alpha.is_finite() && params.beta.is_finite() && params.bias.is_finite());
            let returned: f64 = scenes
                .iter()
                .map(|s| {
                    loss_and_gradient(&s.image, &s.sparse, &s.target, &params, 4, &cfg.weights, None)
                        .unwrap()
                        .0
                        .total
                })
                .sum::<f64>()
                / scenes.len() as f64;
            assert!(returned <= curve[0].1 + 1e-12, "{returned} vs init {}", curve[0].1);
        }
        Err(e) => {
            let msg = e.to_string();
            assert!(msg.contains("iteration") || msg.contains("support"), "{msg}");
        }
    }
}

#[test]
fn config_validation_rejects_bad_settings() {
    let scenes = dataset();
    let init = KernelParams::new(8.0, 2.0, 2.0, false).unwrap();
    let good = TrainingConfig {
        weights: LossWeights::default(),
        learning_rate: 0.1,
        iterations: 1,
        sample_rate: 1.0,
        seed: 0,
    };
    for bad in [
        TrainingConfig { learning_rate: 0.0, ..good },
        TrainingConfig { iterations: 0, ..good },
        TrainingConfig { sample_rate: 0.0, ..good },
        TrainingConfig { sample_rate: 1.5, ..good },
    ] {
        assert!(train_kernel(&scenes, &init, 4, &bad).is_err());
    }
    assert!(train_kernel(&[], &init, 4, &good).is_err());
}
