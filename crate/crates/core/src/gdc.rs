//! Graph-based correction of 3-D depth points anchored to sparse measurements.
//!
//! A k-nearest-neighbor graph with locally-fitted reconstruction weights turns
//! "neighboring points predict each other's depth" into a sparse linear
//! system. Anchoring some nodes to measured values and re-solving the rest
//! propagates measurement offsets across the surface. Expanded suggestions
//! join as soft anchors whose pull grows with confidence: weight 0 at C = 0
//! (plain free node) up to a hard anchor at C = 1.

use std::path::Path;

use crate::camera::{CameraIntrinsics, PointCloud3D};
use crate::field::{DenseField, Representation, SparseSignalMap};
use crate::linalg::{least_squares_cg, least_squares_dense, solve_dense, SparseRows};
use crate::{Error, Result};

/// Default relative Tikhonov strength for the weight fit.
pub const DEFAULT_GRAPH_EPSILON: f64 = 1e-3;

/// kNN reconstruction graph: per node, k neighbor indices and a weight row
/// that sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    n_nodes: usize,
    k: usize,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.n_nodes
    }

    pub fn is_empty(&self) -> bool {
        self.n_nodes == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node * self.k..(node + 1) * self.k]
    }

    pub fn weights(&self, node: usize) -> &[f64] {
        &self.weights[node * self.k..(node + 1) * self.k]
    }
}

/// Builds the graph over the full cloud: k nearest by 3-D Euclidean distance
/// (ties to the lower index), weights fitted per row to reproduce the node's
/// depth from its neighbors' depths.
///
/// The row fit minimizes (z_i - sum_j w_ij z_j)^2 subject to sum_j w_ij = 1,
/// with a Tikhonov term epsilon * (mean squared neighbor depth offset) for
/// uniqueness. Neighborhoods whose depths all equal z_i get uniform rows (any
/// normalized row is optimal there); with epsilon = 0 a non-trivial
/// neighborhood is singular and reported as an error.
pub fn build_graph(cloud: &PointCloud3D, k: usize, epsilon: f64) -> Result<NeighborGraph> {
    let n = cloud.len();
    if k == 0 {
        return Err(Error::config("graph needs k >= 1"));
    }
    if k >= n {
        return Err(Error::config(format!("k = {k} must be below the node count {n}")));
    }
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::config(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    let points = cloud.points();
    let mut neighbors = Vec::with_capacity(n * k);
    let mut weights = Vec::with_capacity(n * k);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        candidates.clear();
        let pi = points[i];
        for (j, pj) in points.iter().enumerate() {
            if j == i {
                continue;
            }
            let (dx, dy, dz) = (pi.x - pj.x, pi.y - pj.y, pi.z - pj.z);
            candidates.push((dx * dx + dy * dy + dz * dz, j));
        }
        candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let row: Vec<usize> = candidates[..k].iter().map(|&(_, j)| j).collect();
        let w = fit_row_weights(
            points[i].z,
            &row.iter().map(|&j| points[j].z).collect::<Vec<_>>(),
            epsilon,
        )
        .map_err(|e| Error::numerical(format!("node {i}: {e}")))?;
        neighbors.extend_from_slice(&row);
        weights.extend_from_slice(&w);
    }
    Ok(NeighborGraph { n_nodes: n, k, neighbors, weights })
}

/// Constrained least-squares row fit via the Gram system (G + reg I) y = 1,
/// w = y / sum(y), where G_jl = (z_i - z_j)(z_i - z_l).
fn fit_row_weights(z_i: f64, neighbor_z: &[f64], epsilon: f64) -> std::result::Result<Vec<f64>, String> {
    let k = neighbor_z.len();
    let delta: Vec<f64> = neighbor_z.iter().map(|&z| z_i - z).collect();
    let trace: f64 = delta.iter().map(|d| d * d).sum();
    if trace == 0.0 {
        // Every neighbor already matches z_i; all normalized rows are optimal.
        return Ok(vec![1.0 / k as f64; k]);
    }
    let reg = epsilon * trace / k as f64;
    let mut gram = vec![0.0; k * k];
    for j in 0..k {
        for l in 0..k {
            gram[j * k + l] = delta[j] * delta[l];
        }
        gram[j * k + j] += reg;
    }
    let y = solve_dense(gram, vec![1.0; k])
        .map_err(|_| "degenerate neighborhood, weight fit needs epsilon > 0".to_string())?;
    let total: f64 = y.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return Err("degenerate neighborhood, weight fit needs epsilon > 0".to_string());
    }
    Ok(y.iter().map(|v| v / total).collect())
}

/// Reconstruction residual sum_i (z_i - sum_j w_ij z_j)^2.
pub fn reconstruction_objective(graph: &NeighborGraph, z: &[f64]) -> f64 {
    assert_eq!(z.len(), graph.len(), "depth vector length must match the graph");
    let mut total = 0.0;
    for i in 0..graph.len() {
        let mut r = z[i];
        for (&j, &w) in graph.neighbors(i).iter().zip(graph.weights(i)) {
            r -= w * z[j];
        }
        total += r * r;
    }
    total
}

/// Node role in a correction problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Hint,
    Expanded,
    Free,
}

impl NodeRole {
    fn name(self) -> &'static str {
        match self {
            NodeRole::Hint => "hint",
            NodeRole::Expanded => "exp",
            NodeRole::Free => "free",
        }
    }
}

/// One correction instance: node positions ordered hints first, expanded next,
/// free last, plus the anchor values.
///
/// Positions carry the *predicted* geometry (z is the uncorrected depth); hint
/// nodes anchor to their measured value, expanded nodes to their suggested
/// value with confidence in [0, 1]. Pixel back-references are optional so
/// deserialized instances without image context still solve.
#[derive(Debug, Clone, PartialEq)]
pub struct GdcProblem {
    positions: Vec<[f64; 3]>,
    pixels: Vec<Option<(usize, usize)>>,
    hint_values: Vec<f64>,
    expanded_values: Vec<f64>,
    expanded_confidence: Vec<f64>,
}

impl GdcProblem {
    pub fn new(
        positions: Vec<[f64; 3]>,
        pixels: Vec<Option<(usize, usize)>>,
        hint_values: Vec<f64>,
        expanded_values: Vec<f64>,
        expanded_confidence: Vec<f64>,
    ) -> Result<Self> {
        if pixels.len() != positions.len() {
            return Err(Error::config("pixel back-references must cover every node"));
        }
        if expanded_values.len() != expanded_confidence.len() {
            return Err(Error::config("every expanded node needs a value and a confidence"));
        }
        if hint_values.len() + expanded_values.len() > positions.len() {
            return Err(Error::config(format!(
                "{} anchored nodes but only {} positions",
                hint_values.len() + expanded_values.len(),
                positions.len()
            )));
        }
        for (idx, p) in positions.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite() && p[2] > 0.0) {
                return Err(Error::config(format!(
                    "node {idx} position ({}, {}, {}) is not a finite point in front of the camera",
                    p[0], p[1], p[2]
                )));
            }
        }
        for (what, list) in [("hint", &hint_values), ("expanded", &expanded_values)] {
            if let Some(v) = list.iter().find(|v| !v.is_finite() || **v <= 0.0) {
                return Err(Error::config(format!("{what} value {v} must be finite and > 0")));
            }
        }
        if let Some(c) = expanded_confidence.iter().find(|c| !c.is_finite() || !(0.0..=1.0).contains(*c)) {
            return Err(Error::config(format!("confidence {c} outside [0, 1]")));
        }
        Ok(GdcProblem { positions, pixels, hint_values, expanded_values, expanded_confidence })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn hint_count(&self) -> usize {
        self.hint_values.len()
    }

    pub fn expanded_count(&self) -> usize {
        self.expanded_values.len()
    }

    pub fn free_count(&self) -> usize {
        self.len() - self.hint_count() - self.expanded_count()
    }

    pub fn role(&self, node: usize) -> NodeRole {
        if node < self.hint_count() {
            NodeRole::Hint
        } else if node < self.hint_count() + self.expanded_count() {
            NodeRole::Expanded
        } else {
            NodeRole::Free
        }
    }

    pub fn position(&self, node: usize) -> [f64; 3] {
        self.positions[node]
    }

    pub fn pixel(&self, node: usize) -> Option<(usize, usize)> {
        self.pixels[node]
    }

    pub fn hint_values(&self) -> &[f64] {
        &self.hint_values
    }

    pub fn expanded_values(&self) -> &[f64] {
        &self.expanded_values
    }

    pub fn expanded_confidence(&self) -> &[f64] {
        &self.expanded_confidence
    }

    /// Initial depth of every node, in node order.
    pub fn depths(&self) -> Vec<f64> {
        self.positions.iter().map(|p| p[2]).collect()
    }

    /// The cloud the graph is built over (node order preserved).
    pub fn cloud(&self) -> PointCloud3D {
        let points = self
            .positions
            .iter()
            .zip(&self.pixels)
            .map(|(p, px)| {
                let (row, col) = px.unwrap_or((0, 0));
                crate::camera::CloudPoint { x: p[0], y: p[1], z: p[2], row, col }
            })
            .collect();
        PointCloud3D::new(points).expect("positions validated on construction")
    }

    /// Same nodes with the expanded anchors demoted to free nodes. Node order
    /// is unchanged, so a graph built for `self` stays valid.
    pub fn without_expansion(&self) -> GdcProblem {
        GdcProblem {
            positions: self.positions.clone(),
            pixels: self.pixels.clone(),
            hint_values: self.hint_values.clone(),
            expanded_values: Vec::new(),
            expanded_confidence: Vec::new(),
        }
    }

    /// Same nodes with the expanded anchors promoted to full hints at their
    /// suggested values. Node order is unchanged.
    pub fn with_expanded_as_hints(&self) -> GdcProblem {
        let mut hints = self.hint_values.clone();
        hints.extend_from_slice(&self.expanded_values);
        GdcProblem {
            positions: self.positions.clone(),
            pixels: self.pixels.clone(),
            hint_values: hints,
            expanded_values: Vec::new(),
            expanded_confidence: Vec::new(),
        }
    }
}

/// Assembles a correction problem from image-space inputs.
///
/// Every node is positioned by the *predicted* geometry, hint pixels
/// included; a uniform prediction drift then shifts the whole cloud without
/// changing pairwise structure, which is what lets anchored re-solving remove
/// it. Hint pixels become anchor nodes (positioned by the prediction where
/// valid, by the hint itself where the prediction has a hole). When an
/// expansion is attached, pixels it covers turn into soft anchors carrying
/// the suggested value and its confidence; the rest stay free. Pixels with no
/// valid prediction and no hint contribute no node.
pub fn problem_from_fields(
    prediction: &DenseField,
    hints: &SparseSignalMap,
    expansion: Option<(&DenseField, &DenseField)>,
    intrinsics: &CameraIntrinsics,
) -> Result<GdcProblem> {
    if prediction.representation() != Representation::DepthMeters {
        return Err(Error::Representation {
            expected: Representation::DepthMeters.name().to_string(),
            found: prediction.representation().name().to_string(),
        });
    }
    if hints.representation() != Representation::DepthMeters {
        return Err(Error::Representation {
            expected: Representation::DepthMeters.name().to_string(),
            found: hints.representation().name().to_string(),
        });
    }
    if hints.height() != prediction.height() || hints.width() != prediction.width() {
        return Err(Error::config(format!(
            "hints cover a {}x{} grid, prediction is {}x{}",
            hints.height(),
            hints.width(),
            prediction.height(),
            prediction.width()
        )));
    }
    if let Some((expanded, confidence)) = expansion {
        if !expanded.same_shape(prediction) || !confidence.same_shape(prediction) {
            return Err(Error::config("expansion maps must match the prediction shape"));
        }
    }

    let mut positions = Vec::new();
    let mut pixels = Vec::new();
    let mut hint_values = Vec::new();
    for p in hints.points() {
        let z = prediction.get(p.row, p.col).unwrap_or(p.value);
        positions.push(intrinsics.backproject_pixel(p.row, p.col, z)?);
        pixels.push(Some((p.row, p.col)));
        hint_values.push(p.value);
    }
    let mut expanded_nodes = Vec::new();
    let mut expanded_values = Vec::new();
    let mut expanded_confidence = Vec::new();
    let mut free_nodes = Vec::new();
    for (i, j, z) in prediction.iter_valid() {
        if hints.value_at(i, j).is_some() {
            continue;
        }
        let position = intrinsics.backproject_pixel(i, j, z)?;
        let anchored = expansion.and_then(|(expanded, confidence)| {
            Some((expanded.get(i, j)?, confidence.get(i, j)?))
        });
        match anchored {
            Some((value, c)) => {
                expanded_nodes.push((position, (i, j)));
                expanded_values.push(value);
                expanded_confidence.push(c);
            }
            None => free_nodes.push((position, (i, j))),
        }
    }
    for (position, pixel) in expanded_nodes.into_iter().chain(free_nodes) {
        positions.push(position);
        pixels.push(Some(pixel));
    }
    GdcProblem::new(positions, pixels, hint_values, expanded_values, expanded_confidence)
}

/// Writes a per-node solution back onto the pixel grid.
pub fn solution_to_field(
    problem: &GdcProblem,
    solution: &[f64],
    height: usize,
    width: usize,
) -> Result<DenseField> {
    if solution.len() != problem.len() {
        return Err(Error::config(format!(
            "solution has {} entries for {} nodes",
            solution.len(),
            problem.len()
        )));
    }
    let mut field = DenseField::empty(height, width, Representation::DepthMeters);
    for (node, &z) in solution.iter().enumerate() {
        let Some((i, j)) = problem.pixel(node) else {
            return Err(Error::config(format!(
                "node {node} has no pixel back-reference, cannot rasterize"
            )));
        };
        field.set(i, j, z)?;
    }
    Ok(field)
}

/// How each node enters the linear system.
enum Slot {
    Fixed(f64),
    Soft { var: usize, target: f64, weight: f64 },
    Free { var: usize },
}

impl Slot {
    fn var(&self) -> Option<usize> {
        match self {
            Slot::Fixed(_) => None,
            Slot::Soft { var, .. } | Slot::Free { var } => Some(*var),
        }
    }
}

fn assemble_slots(problem: &GdcProblem, with_confidence: bool) -> (Vec<Slot>, usize) {
    let mut slots = Vec::with_capacity(problem.len());
    let mut n_vars = 0;
    for node in 0..problem.len() {
        let slot = match problem.role(node) {
            NodeRole::Hint => Slot::Fixed(problem.hint_values[node]),
            NodeRole::Expanded => {
                debug_assert!(with_confidence);
                let e = node - problem.hint_count();
                let c = problem.expanded_confidence[e];
                let target = problem.expanded_values[e];
                if c >= 1.0 {
                    Slot::Fixed(target)
                } else if c <= 0.0 {
                    let var = n_vars;
                    n_vars += 1;
                    Slot::Free { var }
                } else {
                    let var = n_vars;
                    n_vars += 1;
                    Slot::Soft { var, target, weight: (c / (1.0 - c)).sqrt() }
                }
            }
            NodeRole::Free => {
                let var = n_vars;
                n_vars += 1;
                Slot::Free { var }
            }
        };
        slots.push(slot);
    }
    (slots, n_vars)
}

/// Reconstruction rows over the free variables plus one penalty row per soft
/// anchor.
fn build_system(graph: &NeighborGraph, slots: &[Slot], n_vars: usize) -> (SparseRows, Vec<f64>) {
    let mut a = SparseRows::new(n_vars);
    let mut b = Vec::with_capacity(graph.len());
    for i in 0..graph.len() {
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(graph.k() + 1);
        let mut rhs = 0.0;
        match &slots[i] {
            Slot::Fixed(v) => rhs -= v,
            slot => entries.push((slot.var().expect("variable slot"), 1.0)),
        }
        for (&j, &w) in graph.neighbors(i).iter().zip(graph.weights(i)) {
            match &slots[j] {
                Slot::Fixed(v) => rhs += w * v,
                slot => entries.push((slot.var().expect("variable slot"), -w)),
            }
        }
        a.push_row(entries);
        b.push(rhs);
    }
    for slot in slots {
        if let Slot::Soft { var, target, weight } = slot {
            a.push_row(vec![(*var, *weight)]);
            b.push(weight * target);
        }
    }
    (a, b)
}

/// Fails fast when some connected component holds no anchor: its depths would
/// be undetermined (the constant vector on the component is a null direction).
fn check_anchored(graph: &NeighborGraph, slots: &[Slot]) -> Result<()> {
    let n = graph.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for &j in graph.neighbors(i) {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri] = rj;
            }
        }
    }
    let mut anchored = vec![false; n];
    for (i, slot) in slots.iter().enumerate() {
        if matches!(slot, Slot::Fixed(_) | Slot::Soft { .. }) {
            let root = find(&mut parent, i);
            anchored[root] = true;
        }
    }
    let mut orphan_sizes: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        if !anchored[root] {
            *orphan_sizes.entry(root).or_insert(0) += 1;
        }
    }
    if let Some((&root, &size)) = orphan_sizes.iter().next() {
        return Err(Error::numerical(format!(
            "underdetermined system: {} node component around node {root} has no anchored node ({} such components)",
            size,
            orphan_sizes.len()
        )));
    }
    Ok(())
}

fn scatter(slots: &[Slot], x: &[f64]) -> Vec<f64> {
    slots
        .iter()
        .map(|slot| match slot {
            Slot::Fixed(v) => *v,
            slot => x[slot.var().expect("variable slot")],
        })
        .collect()
}

const GRAD_NORM_LIMIT: f64 = 1e-8;

fn solve(problem: &GdcProblem, graph: &NeighborGraph, with_confidence: bool, dense: bool) -> Result<Vec<f64>> {
    if graph.len() != problem.len() {
        return Err(Error::config(format!(
            "graph has {} nodes but the problem has {}",
            graph.len(),
            problem.len()
        )));
    }
    if problem.hint_count() == 0 {
        return Err(Error::config("correction needs at least one hint"));
    }
    let (slots, n_vars) = assemble_slots(problem, with_confidence);
    if n_vars == 0 {
        return Ok(scatter(&slots, &[]));
    }
    check_anchored(graph, &slots)?;
    let (a, b) = build_system(graph, &slots, n_vars);
    let x = if dense {
        let x = least_squares_dense(&a, &b)?;
        let grad = a.matvec_transpose(
            &b.iter().zip(a.matvec(&x)).map(|(bi, axi)| bi - axi).collect::<Vec<_>>(),
        );
        let grad_norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad_norm >= GRAD_NORM_LIMIT {
            return Err(Error::numerical(format!(
                "dense solve left gradient norm {grad_norm:.3e}"
            )));
        }
        x
    } else {
        // Run well past the acceptance limit: a 1e-10 gradient still allows
        // solution error near 1e-7 when the smallest curvature is small.
        let sol = least_squares_cg(&a, &b, 1e-12, 10 * problem.len().max(1));
        if sol.grad_norm >= GRAD_NORM_LIMIT {
            return Err(Error::numerical(format!(
                "solver stopped after {} iterations with gradient norm {:.3e}",
                sol.iterations, sol.grad_norm
            )));
        }
        sol.x
    };
    Ok(scatter(&slots, &x))
}

/// Re-solves free depths with hint nodes pinned to their measured values.
///
/// Expects a problem without expanded nodes (demote them first via
/// [`GdcProblem::without_expansion`] when comparing against the
/// confidence-weighted variant).
pub fn correct(problem: &GdcProblem, graph: &NeighborGraph) -> Result<Vec<f64>> {
    if problem.expanded_count() != 0 {
        return Err(Error::config(
            "correct() takes hint and free nodes only; use correct_with_confidence for expanded anchors",
        ));
    }
    solve(problem, graph, false, false)
}

/// Dense-normal-equations route of [`correct`], kept as an independent oracle.
pub fn correct_dense(problem: &GdcProblem, graph: &NeighborGraph) -> Result<Vec<f64>> {
    if problem.expanded_count() != 0 {
        return Err(Error::config(
            "correct_dense() takes hint and free nodes only; use correct_with_confidence_dense for expanded anchors",
        ));
    }
    solve(problem, graph, false, true)
}

/// Confidence-weighted correction: hints are hard anchors, expanded nodes pull
/// toward their suggestion with strength growing in confidence, free nodes
/// follow the graph.
///
/// Confidence 0 reproduces [`correct`] with the same hints exactly; confidence
/// 1 reproduces [`correct`] with the suggestion promoted to a hint exactly.
pub fn correct_with_confidence(problem: &GdcProblem, graph: &NeighborGraph) -> Result<Vec<f64>> {
    solve(problem, graph, true, false)
}

/// Dense oracle route of [`correct_with_confidence`].
pub fn correct_with_confidence_dense(problem: &GdcProblem, graph: &NeighborGraph) -> Result<Vec<f64>> {
    solve(problem, graph, true, true)
}

// ---------------------------------------------------------------------------
// Node-table serialization

/// Writes the problem as a node table, one `idx,x,y,z,role,value,confidence`
/// line per node. `value` repeats the depth for free nodes; pixel
/// back-references are not part of the format.
pub fn write_problem(path: &Path, problem: &GdcProblem) -> Result<()> {
    let mut out = String::from("# idx,x,y,z,role,value,confidence\n");
    for node in 0..problem.len() {
        let p = problem.position(node);
        let role = problem.role(node);
        let (value, confidence) = match role {
            NodeRole::Hint => (problem.hint_values[node], 1.0),
            NodeRole::Expanded => {
                let e = node - problem.hint_count();
                (problem.expanded_values[e], problem.expanded_confidence[e])
            }
            NodeRole::Free => (p[2], 0.0),
        };
        out.push_str(&format!(
            "{node},{},{},{},{},{value},{confidence}\n",
            p[0],
            p[1],
            p[2],
            role.name()
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a node table written by [`write_problem`]. Nodes must appear in
/// order: hints first, expanded next, free last, with consecutive indices.
pub fn read_problem(path: &Path) -> Result<GdcProblem> {
    let text = std::fs::read_to_string(path)?;
    let format_err = |line_no: usize, message: String| Error::Format {
        path: path.display().to_string(),
        message: format!("line {line_no}: {message}"),
        offset: None,
    };
    let mut positions = Vec::new();
    let mut hint_values = Vec::new();
    let mut expanded_values = Vec::new();
    let mut expanded_confidence = Vec::new();
    let mut last_role = NodeRole::Hint;
    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(format_err(line_no, format!("expected 7 fields, got {}", fields.len())));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| format_err(line_no, format!("bad index {:?}", fields[0])))?;
        if idx != positions.len() {
            return Err(format_err(line_no, format!("index {idx} out of order, expected {}", positions.len())));
        }
        let mut nums = [0.0f64; 3];
        for (slot, raw) in nums.iter_mut().zip(&fields[1..4]) {
            *slot = raw
                .parse()
                .map_err(|_| format_err(line_no, format!("bad coordinate {raw:?}")))?;
        }
        let role = match fields[4] {
            "hint" => NodeRole::Hint,
            "exp" => NodeRole::Expanded,
            "free" => NodeRole::Free,
            other => return Err(format_err(line_no, format!("unknown role {other:?}"))),
        };
        let order = |r: NodeRole| match r {
            NodeRole::Hint => 0,
            NodeRole::Expanded => 1,
            NodeRole::Free => 2,
        };
        if order(role) < order(last_role) {
            return Err(format_err(line_no, "nodes must be ordered hint, exp, free".to_string()));
        }
        last_role = role;
        let value: f64 = fields[5]
            .parse()
            .map_err(|_| format_err(line_no, format!("bad value {:?}", fields[5])))?;
        let confidence: f64 = fields[6]
            .parse()
            .map_err(|_| format_err(line_no, format!("bad confidence {:?}", fields[6])))?;
        positions.push(nums);
        match role {
            NodeRole::Hint => hint_values.push(value),
            NodeRole::Expanded => {
                expanded_values.push(value);
                expanded_confidence.push(confidence);
            }
            NodeRole::Free => {}
        }
    }
    let pixels = vec![None; positions.len()];
    GdcProblem::new(positions, pixels, hint_values, expanded_values, expanded_confidence)
}
