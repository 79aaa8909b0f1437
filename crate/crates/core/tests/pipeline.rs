//! Cross-module flows on synthetic scenes: corrupt a rendered scene, sample
//! sparse measurements, expand them, and check that each guidance stage
//! actually reduces error against the clean render.

use depthguide::expansion::{expand, AdhocConfig, ExpansionModel, KernelParams};
use depthguide::gdc::{
    build_graph, correct, correct_with_confidence, problem_from_fields, solution_to_field,
    DEFAULT_GRAPH_EPSILON,
};
use depthguide::guidance::{fuse_output, naive_output_guidance};
use depthguide::metrics::evaluate;
use depthguide::synth::{
    corrupt, generate_scene, sample_beams, sample_uniform, CorruptionSpec, SceneSpec,
};

fn adhoc() -> ExpansionModel {
    ExpansionModel::Adhoc(AdhocConfig::new(3, 0.08).unwrap())
}

#[test]
fn fused_output_beats_naive_beats_raw_on_a_biased_scene() {
    let spec = SceneSpec::desk_default();
    let (image, gt, _) = generate_scene(&spec).unwrap();
    let corruption = CorruptionSpec {
        bias: 2.0,
        noise_sigma: 0.05,
        ..CorruptionSpec::none(1)
    };
    let prediction = corrupt(&gt, &corruption).unwrap();
    let sparse = sample_uniform(&gt, 0.15, 2).unwrap();
    let (expanded, confidence) = expand(&image, &sparse, &adhoc(), 1.0, 0).unwrap();

    let fused = fuse_output(&expanded, &confidence, &prediction).unwrap();
    let naive = naive_output_guidance(&sparse, &prediction).unwrap();

    let raw = evaluate(&prediction, &gt).unwrap();
    let naive_eval = evaluate(&naive, &gt).unwrap();
    let fused_eval = evaluate(&fused, &gt).unwrap();
    assert!(
        fused_eval.avg <= naive_eval.avg && naive_eval.avg <= raw.avg,
        "avg ordering violated: fused {} naive {} raw {}",
        fused_eval.avg,
        naive_eval.avg,
        raw.avg
    );
    // The expansion corrects far more pixels than the sparse set alone.
    assert!(fused_eval.avg < 0.5 * raw.avg);
}

#[test]
fn graph_correction_pulls_a_drifted_scene_back_to_its_hints() {
    let mut spec = SceneSpec::desk_default();
    spec.height = 24;
    spec.width = 32;
    spec.cu = 15.5;
    spec.cv = 11.5;
    spec.boxes = vec![];
    // Keep the row-to-row depth step comparable to the in-row point spacing,
    // otherwise the kNN graph degenerates into isolated scanline chains.
    spec.depth_top = 12.0;
    spec.depth_bottom = 8.0;
    let (image, gt, intrinsics) = generate_scene(&spec).unwrap();
    let prediction = corrupt(
        &gt,
        &CorruptionSpec { bias: 1.5, noise_sigma: 0.02, ..CorruptionSpec::none(3) },
    )
    .unwrap();
    let hints = sample_beams(&gt, &intrinsics, 4, 0.8, 5).unwrap();

    // Hints only: every non-hint node floats.
    let problem = problem_from_fields(&prediction, &hints, None, &intrinsics).unwrap();
    let graph = build_graph(&problem.cloud(), 6, DEFAULT_GRAPH_EPSILON).unwrap();
    let solution = correct(&problem, &graph).unwrap();
    let corrected = solution_to_field(&problem, &solution, spec.height, spec.width).unwrap();

    let raw = evaluate(&prediction, &gt).unwrap();
    let fixed = evaluate(&corrected, &gt).unwrap();
    assert!(
        fixed.avg < 0.5 * raw.avg,
        "correction too weak: {} vs raw {}",
        fixed.avg,
        raw.avg
    );
    // Hint pixels come back exactly.
    for p in hints.points() {
        assert_eq!(corrected.get(p.row, p.col), Some(p.value));
    }

    // Soft anchors from a decaying-confidence expansion: copied values get
    // less trustworthy away from their beam, so the pull stays gentle and the
    // drift still comes out. (Binary adhoc confidence would hard-pin the
    // flat-copied values and fight the ramp instead.)
    let params = KernelParams::new(2.5, 0.15, 0.5, false).unwrap();
    let model = ExpansionModel::Kernel { params, half_size: 3 };
    let (expanded, confidence) = expand(&image, &hints, &model, 1.0, 0).unwrap();
    let soft = problem_from_fields(
        &prediction,
        &hints,
        Some((&expanded, &confidence)),
        &intrinsics,
    )
    .unwrap();
    let soft_graph = build_graph(&soft.cloud(), 6, DEFAULT_GRAPH_EPSILON).unwrap();
    let soft_solution = correct_with_confidence(&soft, &soft_graph).unwrap();
    let soft_field = solution_to_field(&soft, &soft_solution, spec.height, spec.width).unwrap();
    let soft_eval = evaluate(&soft_field, &gt).unwrap();
    assert!(
        soft_eval.avg < 0.5 * raw.avg,
        "soft-anchored correction too weak: {} vs raw {}",
        soft_eval.avg,
        raw.avg
    );
    for p in hints.points() {
        assert_eq!(soft_field.get(p.row, p.col), Some(p.value));
    }
}
