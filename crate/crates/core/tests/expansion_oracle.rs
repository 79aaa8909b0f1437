//! Brute-force oracles for patch aggregation and the training gradient.
//!
//! Everything here recomputes expected values from first principles: the
//! aggregation oracle walks every pixel and every patch directly, and the
//! gradient oracle compares analytic derivatives against central finite
//! differences of an independently assembled objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use depthguide::expansion::{
    aggregate, expand_patches, loss_and_gradient, ExpansionModel, KernelParams, LossWeights,
};
use depthguide::field::{
    patch_rect, ConfidencePatch, DenseField, IntensityImage, Representation, SparsePoint,
    SparseSignalMap,
};

fn random_instance(
    rng: &mut ChaCha8Rng,
) -> (usize, usize, SparseSignalMap, Vec<ConfidencePatch>) {
    let h = rng.gen_range(3..=9);
    let w = rng.gen_range(3..=9);
    let n = rng.gen_range(1..=5.min(h * w));
    let mut cells: Vec<(usize, usize)> = (0..h * w).map(|idx| (idx / w, idx % w)).collect();
    for k in 0..n {
        let swap = rng.gen_range(k..cells.len());
        cells.swap(k, swap);
    }
    let points: Vec<SparsePoint> = cells[..n]
        .iter()
        .map(|&(row, col)| SparsePoint { row, col, value: rng.gen_range(1.0..60.0) })
        .collect();
    let sparse = SparseSignalMap::new(h, w, Representation::DepthMeters, points).unwrap();
    let patches: Vec<ConfidencePatch> = sparse
        .points()
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let half = rng.gen_range(0..=3);
            let (row0, col0, rows, cols) = patch_rect(p.row, p.col, half, h, w);
            let values: Vec<f64> = (0..rows * cols)
                .map(|idx| {
                    let (i, j) = (row0 + idx / cols, col0 + idx % cols);
                    if (i, j) == (p.row, p.col) {
                        1.0
                    } else if rng.gen_bool(0.15) {
                        0.0
                    } else {
                        rng.gen_range(0.0..1.0)
                    }
                })
                .collect();
            ConfidencePatch::new(k, p, half, h, w, values).unwrap()
        })
        .collect();
    (h, w, sparse, patches)
}

/// Direct per-pixel recomputation of the blended signal and peak confidence.
fn oracle_maps(
    h: usize,
    w: usize,
    sparse: &SparseSignalMap,
    patches: &[ConfidencePatch],
) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let mut expanded = vec![None; h * w];
    let mut confidence = vec![None; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut peak: f64 = 0.0;
            for p in patches {
                if let Some(c) = p.confidence_at(i, j) {
                    num += c * p.source_value;
                    den += c;
                    peak = peak.max(c);
                }
            }
            if den > 0.0 {
                expanded[i * w + j] = Some(num / den);
                confidence[i * w + j] = Some(peak);
            }
        }
    }
    for p in sparse.points() {
        expanded[p.row * w + p.col] = Some(p.value);
        confidence[p.row * w + p.col] = Some(1.0);
    }
    (expanded, confidence)
}

#[test]
fn aggregation_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..300 {
        let (h, w, sparse, patches) = random_instance(&mut rng);
        let (exp, conf) = aggregate(&patches, &sparse).unwrap();
        let (want_exp, want_conf) = oracle_maps(h, w, &sparse, &patches);
        for i in 0..h {
            for j in 0..w {
                match (exp.get(i, j), want_exp[i * w + j]) {
                    (Some(got), Some(want)) => {
                        assert!((got - want).abs() < 1e-12, "trial {trial} pixel ({i}, {j}): {got} vs {want}");
                        let got_c = conf.get(i, j).unwrap();
                        let want_c = want_conf[i * w + j].unwrap();
                        assert_eq!(got_c, want_c, "trial {trial} confidence at ({i}, {j})");
                    }
                    (None, None) => assert!(conf.get(i, j).is_none()),
                    (got, want) => panic!("trial {trial} validity split at ({i}, {j}): {got:?} vs {want:?}"),
                }
            }
        }
    }
}

#[test]
fn aggregation_is_invariant_to_patch_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let (_, _, sparse, mut patches) = random_instance(&mut rng);
        let baseline = aggregate(&patches, &sparse).unwrap();
        for k in 0..patches.len() {
            let swap = rng.gen_range(k..patches.len());
            patches.swap(k, swap);
        }
        let shuffled = aggregate(&patches, &sparse).unwrap();
        // Bitwise identical: accumulation must happen in source order, not
        // argument order.
        assert_eq!(baseline, shuffled);
    }
}

#[test]
fn peak_confidence_survives_where_averaging_dilutes() {
    // One confident source at a pixel two faint far sources also touch.
    // The blended signal stays near the confident source's value, and peak
    // confidence reports 1.0 where a mean would collapse to about a third.
    let points = vec![
        SparsePoint { row: 0, col: 0, value: 50.0 },
        SparsePoint { row: 0, col: 2, value: 100.0 },
        SparsePoint { row: 0, col: 4, value: 100.0 },
    ];
    let sparse = SparseSignalMap::new(1, 5, Representation::DepthMeters, points).unwrap();
    let mk = |k: usize, p: SparsePoint, values: Vec<f64>| {
        ConfidencePatch::new(k, p, 4, 1, 5, values).unwrap()
    };
    let pts = sparse.points().to_vec();
    let patches = vec![
        mk(0, pts[0], vec![1.0, 1.0, 0.0, 0.0, 0.0]),
        mk(1, pts[1], vec![0.0, 0.001, 1.0, 0.0, 0.0]),
        mk(2, pts[2], vec![0.0, 0.001, 0.0, 0.0, 1.0]),
    ];
    let (exp, conf) = aggregate(&patches, &sparse).unwrap();
    let blended = exp.get(0, 1).unwrap();
    assert!((blended - (50.0 + 0.1 + 0.1) / 1.002).abs() < 1e-12);
    assert_eq!(conf.get(0, 1), Some(1.0));
    // A mean of the covering confidences would report near-total uncertainty.
    let mean: f64 = (1.0 + 0.001 + 0.001) / 3.0;
    assert!((mean - 0.334).abs() < 1e-3);
}

// ---------------------------------------------------------------------------
// Gradient oracle

struct GradInstance {
    image: IntensityImage,
    sparse: SparseSignalMap,
    target: DenseField,
    params: KernelParams,
    half_size: usize,
}

fn random_grad_instance(rng: &mut ChaCha8Rng, path_accum: bool) -> GradInstance {
    let h = rng.gen_range(5..=9);
    let w = rng.gen_range(5..=9);
    let pixels: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let image = IntensityImage::new(h, w, 1, pixels).unwrap();
    let n = rng.gen_range(2..=4);
    let mut cells: Vec<(usize, usize)> = (0..h * w).map(|idx| (idx / w, idx % w)).collect();
    for k in 0..n {
        let swap = rng.gen_range(k..cells.len());
        cells.swap(k, swap);
    }
    let points: Vec<SparsePoint> = cells[..n]
        .iter()
        .map(|&(row, col)| SparsePoint { row, col, value: rng.gen_range(2.0..30.0) })
        .collect();
    let sparse = SparseSignalMap::new(h, w, Representation::DepthMeters, points).unwrap();
    let mut target = DenseField::empty(h, w, Representation::DepthMeters);
    for i in 0..h {
        for j in 0..w {
            if rng.gen_bool(0.9) {
                target.set(i, j, rng.gen_range(2.0..30.0)).unwrap();
            }
        }
    }
    let params = KernelParams::new(
        rng.gen_range(2.0..10.0),
        rng.gen_range(0.08..0.5),
        rng.gen_range(0.5..3.0),
        path_accum,
    )
    .unwrap();
    GradInstance { image, sparse, target, params, half_size: rng.gen_range(2..=4) }
}

/// Loss with the fit-term confidence weights and the support frozen at
/// `frozen`, while the blended signal and the confidence penalty stay live at
/// `live`. Finite differences of this function are what the analytic
/// gradient claims to be.
fn frozen_weight_loss(inst: &GradInstance, live: &KernelParams, frozen: &KernelParams, weights: &LossWeights) -> f64 {
    let model = |p: &KernelParams| ExpansionModel::Kernel { params: *p, half_size: inst.half_size };
    let base = expand_patches(&inst.image, &inst.sparse, &model(frozen), 1.0, 0).unwrap();
    let (_, conf0) = aggregate(&base, &inst.sparse).unwrap();
    let patches = expand_patches(&inst.image, &inst.sparse, &model(live), 1.0, 0).unwrap();
    let (exp, conf) = aggregate(&patches, &inst.sparse).unwrap();
    let mut support = 0usize;
    let mut fit = 0.0;
    let mut penalty = 0.0;
    for (i, j, c0) in conf0.iter_valid() {
        let Some(t) = inst.target.get(i, j) else { continue };
        support += 1;
        fit += c0 * (t - exp.get(i, j).unwrap()).abs();
        penalty += conf.get(i, j).unwrap();
    }
    assert!(support > 0);
    weights.fit * fit / support as f64 + weights.confidence * penalty / support as f64
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let weights = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..24 {
        let inst = random_grad_instance(&mut rng, trial % 3 == 2);
        let (loss, grad) = loss_and_gradient(
            &inst.image,
            &inst.sparse,
            &inst.target,
            &inst.params,
            inst.half_size,
            &weights,
            None,
        )
        .unwrap();
        let base = frozen_weight_loss(&inst, &inst.params, &inst.params, &weights);
        assert!((loss.total - base).abs() < 1e-12, "trial {trial}: loss {} vs assembled {base}", loss.total);

        let h = 1e-5;
        for (coord, analytic) in [(0, grad.alpha), (1, grad.beta), (2, grad.bias)] {
            let mut plus = inst.params;
            let mut minus = inst.params;
            match coord {
                0 => {
                    plus.alpha += h;
                    minus.alpha -= h;
                }
                1 => {
                    plus.beta += h;
                    minus.beta -= h;
                }
                _ => {
                    plus.bias += h;
                    minus.bias -= h;
                }
            }
            let fd = (frozen_weight_loss(&inst, &plus, &inst.params, &weights)
                - frozen_weight_loss(&inst, &minus, &inst.params, &weights))
                / (2.0 * h);
            assert!(
                (fd - analytic).abs() < 1e-4,
                "trial {trial} coord {coord}: fd {fd} vs analytic {analytic}"
            );
        }
    }
}

#[test]
fn fit_term_weights_are_detached_from_the_gradient() {
    // Differencing the plain loss, where the fit weights move with the
    // parameters, must disagree with the analytic gradient somewhere;
    // otherwise the freeze would be dead code.
    let weights = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut max_gap = 0.0f64;
    for _ in 0..10 {
        let inst = random_grad_instance(&mut rng, false);
        let (_, grad) = loss_and_gradient(
            &inst.image,
            &inst.sparse,
            &inst.target,
            &inst.params,
            inst.half_size,
            &weights,
            None,
        )
        .unwrap();
        let h = 1e-5;
        let mut plus = inst.params;
        let mut minus = inst.params;
        plus.bias += h;
        minus.bias -= h;
        // Live weights on both sides: the naive, un-detached objective.
        let fd_naive = (frozen_weight_loss(&inst, &plus, &plus, &weights)
            - frozen_weight_loss(&inst, &minus, &minus, &weights))
            / (2.0 * h);
        max_gap = max_gap.max((fd_naive - grad.bias).abs());
    }
    assert!(max_gap > 1e-3, "detached and naive gradients never split: {max_gap}");
}
