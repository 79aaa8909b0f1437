//! Independent checks of the graph correction: the fitted neighbor weights
//! are verified against their first-order optimality conditions, the solve
//! against a plane it must reconstruct, and the returned depths against the
//! objective value of the uncorrected input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use depthguide::camera::PointCloud3D;
use depthguide::gdc::{build_graph, correct, correct_dense, reconstruction_objective, GdcProblem};

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(2.0..9.0),
            ]
        })
        .collect()
}

fn cloud_from(positions: &[[f64; 3]]) -> PointCloud3D {
    let problem = GdcProblem::new(
        positions.to_vec(),
        vec![None; positions.len()],
        Vec::new(),
        Vec::new(),
        Vec::new(),
    )
    .unwrap();
    problem.cloud()
}

/// Each weight row minimizes the squared depth-reconstruction residual plus
/// the scaled ridge term, subject to summing to one. Stationarity of that
/// constrained problem says (G + reg I) w must be a constant vector, where
/// G_jl is the product of depth differences to neighbors j and l.
#[test]
fn neighbor_weights_satisfy_first_order_conditions() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..40 {
        let n = rng.gen_range(6..=20);
        let positions = random_cloud(&mut rng, n);
        let k = rng.gen_range(1..n.min(6));
        let epsilon = [1e-3, 1e-2, 0.5][trial % 3];
        let graph = build_graph(&cloud_from(&positions), k, epsilon).unwrap();
        for i in 0..n {
            let neighbors = graph.neighbors(i);
            let weights = graph.weights(i);
            assert_eq!(neighbors.len(), k);
            let sum: f64 = weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "trial {trial} node {i}: weights sum to {sum}");

            let delta: Vec<f64> = neighbors.iter().map(|&j| positions[i][2] - positions[j][2]).collect();
            let trace: f64 = delta.iter().map(|d| d * d).sum();
            let reg = epsilon * trace / k as f64;
            let residual: Vec<f64> = (0..k)
                .map(|a| {
                    (0..k).map(|b| delta[a] * delta[b] * weights[b]).sum::<f64>() + reg * weights[a]
                })
                .collect();
            let mean = residual.iter().sum::<f64>() / k as f64;
            let scale = 1.0 + trace.abs();
            for (slot, r) in residual.iter().enumerate() {
                assert!(
                    (r - mean).abs() < 1e-8 * scale,
                    "trial {trial} node {i} slot {slot}: stationarity residual {} vs mean {mean}",
                    r
                );
            }
        }
    }
}

#[test]
fn globally_shifted_plane_is_recovered_from_sparse_hints() {
    // Depths lie on a plane over a 6x6 grid; the whole cloud drifts by +1.
    // Pairwise geometry is unchanged, so the fitted weights still reproduce
    // affine surfaces and three accurate hints pull every node back.
    let (rows, cols) = (6, 6);
    let plane = |i: usize, j: usize| 5.0 + 0.3 * j as f64 - 0.2 * i as f64;
    let hint_cells = [(0usize, 0usize), (2, 4), (5, 1)];
    let mut order: Vec<(usize, usize)> = hint_cells.to_vec();
    for i in 0..rows {
        for j in 0..cols {
            if !hint_cells.contains(&(i, j)) {
                order.push((i, j));
            }
        }
    }
    let positions: Vec<[f64; 3]> = order
        .iter()
        .map(|&(i, j)| [j as f64, i as f64, plane(i, j) + 1.0])
        .collect();
    let hints: Vec<f64> = hint_cells.iter().map(|&(i, j)| plane(i, j)).collect();
    let problem =
        GdcProblem::new(positions, vec![None; rows * cols], hints, Vec::new(), Vec::new()).unwrap();
    let graph = build_graph(&problem.cloud(), 4, 1e-12).unwrap();
    let out = correct(&problem, &graph).unwrap();
    for (node, &(i, j)) in order.iter().enumerate() {
        let want = plane(i, j);
        assert!(
            (out[node] - want).abs() < 1e-5,
            "node {node} at ({i}, {j}): {} vs {want}",
            out[node]
        );
    }
    // The dense route agrees with the iterative one.
    let dense = correct_dense(&problem, &graph).unwrap();
    for (a, b) in out.iter().zip(&dense) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn correction_never_raises_the_objective_over_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for trial in 0..30 {
        let n = rng.gen_range(8..=24);
        let n_hints = rng.gen_range(1..=3);
        let positions = random_cloud(&mut rng, n);
        let hints: Vec<f64> = (0..n_hints).map(|_| rng.gen_range(2.0..9.0)).collect();
        let problem =
            GdcProblem::new(positions, vec![None; n], hints.clone(), Vec::new(), Vec::new())
                .unwrap();
        let graph = build_graph(&problem.cloud(), 3.min(n - 1), 1e-3).unwrap();
        let solved = match correct(&problem, &graph) {
            Ok(z) => z,
            // A random graph can leave some component unanchored; that is a
            // diagnosed failure, not a wrong answer.
            Err(e) => {
                assert!(e.to_string().contains("no anchored node"), "trial {trial}: {e}");
                continue;
            }
        };
        let mut input = problem.depths();
        input[..n_hints].copy_from_slice(&hints);
        let after = reconstruction_objective(&graph, &solved);
        let before = reconstruction_objective(&graph, &input);
        assert!(
            after <= before + 1e-12,
            "trial {trial}: objective rose from {before} to {after}"
        );
        for (slot, &h) in hints.iter().enumerate() {
            assert_eq!(solved[slot], h, "trial {trial}: hint {slot} moved");
        }
    }
}
