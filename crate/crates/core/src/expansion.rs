//! Expansion of sparse signals into confidence-weighted patches and their
//! aggregation into dense suggestion/confidence maps.
//!
//! Two expansion models exist: an intensity flood fill with binary confidence,
//! and a parametric kernel that scores every patch cell from its spatial and
//! intensity distance to the source and can be trained against dense ground
//! truth. Overlapping patches are combined by confidence-weighted averaging of
//! the suggested values and a per-pixel maximum of the confidences; source
//! pixels always keep their measured value with confidence exactly 1.

use std::collections::BinaryHeap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::field::{
    patch_rect, ConfidencePatch, DenseField, IntensityImage, Representation, SparsePoint,
    SparseSignalMap,
};
use crate::{io, Error, Result};

/// Default patch half-size L; footprints are (2L+1) squares.
pub const DEFAULT_PATCH_HALF_SIZE: usize = 16;

/// Flood-fill expansion settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdhocConfig {
    /// Patch half-size L (Chebyshev radius of the footprint).
    pub half_size: usize,
    /// Largest tolerated per-channel intensity difference to the source pixel.
    pub tau: f64,
}

impl AdhocConfig {
    pub fn new(half_size: usize, tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::config(format!("tau must be finite and >= 0, got {tau}")));
        }
        Ok(AdhocConfig { half_size, tau })
    }
}

/// Parameters of the trainable confidence kernel.
///
/// A cell at spatial distance ds and intensity distance di from the source gets
/// confidence sigmoid(bias - ds^2/alpha^2 - di^2/beta^2); the source cell is
/// pinned to exactly 1. With `path_accum` set, the intensity distance is the
/// minimax edge weight over 4-connected paths inside the patch instead of the
/// direct difference to the source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub alpha: f64,
    pub beta: f64,
    pub bias: f64,
    pub path_accum: bool,
}

impl KernelParams {
    pub fn new(alpha: f64, beta: f64, bias: f64, path_accum: bool) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::config(format!("alpha must be finite and > 0, got {alpha}")));
        }
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::config(format!("beta must be finite and > 0, got {beta}")));
        }
        if !bias.is_finite() {
            return Err(Error::config(format!("bias must be finite, got {bias}")));
        }
        Ok(KernelParams { alpha, beta, bias, path_accum })
    }

    /// Reasonable hand-picked starting point for training.
    pub fn default_init() -> Self {
        KernelParams { alpha: 8.0, beta: 0.2, bias: 2.0, path_accum: false }
    }

    /// Loads `alpha= beta= bias= path_accum=` from a key=value file.
    pub fn load(path: &Path) -> Result<Self> {
        let pairs = io::read_kv(path)?;
        let mut alpha = None;
        let mut beta = None;
        let mut bias = None;
        let mut path_accum = None;
        for (k, v) in &pairs {
            let slot = match k.as_str() {
                "alpha" => &mut alpha,
                "beta" => &mut beta,
                "bias" => &mut bias,
                "path_accum" => {
                    path_accum = Some(match v.as_str() {
                        "0" => false,
                        "1" => true,
                        other => {
                            return Err(Error::config(format!("path_accum must be 0 or 1, got {other:?}")))
                        }
                    });
                    continue;
                }
                other => return Err(Error::config(format!("unknown kernel parameter {other:?}"))),
            };
            *slot = Some(
                v.parse::<f64>()
                    .map_err(|_| Error::config(format!("bad value for {k}: {v:?}")))?,
            );
        }
        match (alpha, beta, bias, path_accum) {
            (Some(a), Some(b), Some(c), Some(p)) => KernelParams::new(a, b, c, p),
            _ => Err(Error::config("kernel parameter file must set alpha, beta, bias and path_accum")),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let pairs = vec![
            ("alpha".to_string(), format!("{}", self.alpha)),
            ("beta".to_string(), format!("{}", self.beta)),
            ("bias".to_string(), format!("{}", self.bias)),
            ("path_accum".to_string(), if self.path_accum { "1" } else { "0" }.to_string()),
        ];
        io::write_kv(path, &pairs)
    }
}

/// Which expansion model [`expand`] applies to the chosen sources.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExpansionModel {
    Adhoc(AdhocConfig),
    Kernel { params: KernelParams, half_size: usize },
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------------------
// Flood-fill expansion

/// Grows a binary patch from the source by 4-connected flood fill.
///
/// A cell joins when it is connected to the source through already-joined
/// cells, lies within Chebyshev radius `half_size`, and differs from the
/// *source* pixel by at most `tau` in every channel.
pub fn adhoc_expand(
    image: &IntensityImage,
    source: SparsePoint,
    source_index: usize,
    cfg: &AdhocConfig,
) -> Result<ConfidencePatch> {
    check_source_in_image(image, source)?;
    let (row0, col0, rows, cols) =
        patch_rect(source.row, source.col, cfg.half_size, image.height(), image.width());
    let mut joined = vec![false; rows * cols];
    let center = (source.row - row0) * cols + (source.col - col0);
    joined[center] = true;
    let mut queue = std::collections::VecDeque::from([center]);
    while let Some(cell) = queue.pop_front() {
        let (r, c) = (cell / cols, cell % cols);
        for (nr, nc) in neighbors4(r, c, rows, cols) {
            let ncell = nr * cols + nc;
            if joined[ncell] {
                continue;
            }
            let pixel = (row0 + nr, col0 + nc);
            if image.max_channel_diff(pixel, (source.row, source.col)) <= cfg.tau {
                joined[ncell] = true;
                queue.push_back(ncell);
            }
        }
    }
    let values = joined.iter().map(|&j| if j { 1.0 } else { 0.0 }).collect();
    ConfidencePatch::new(source_index, source, cfg.half_size, image.height(), image.width(), values)
}

fn neighbors4(r: usize, c: usize, rows: usize, cols: usize) -> impl Iterator<Item = (usize, usize)> {
    [
        (r.wrapping_sub(1), c),
        (r + 1, c),
        (r, c.wrapping_sub(1)),
        (r, c + 1),
    ]
    .into_iter()
    .filter(move |&(nr, nc)| nr < rows && nc < cols)
}

fn check_source_in_image(image: &IntensityImage, source: SparsePoint) -> Result<()> {
    if source.row >= image.height() || source.col >= image.width() {
        return Err(Error::config(format!(
            "source ({}, {}) outside {}x{} image",
            source.row,
            source.col,
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Parametric kernel

/// One evaluated patch cell with the distances that produced its confidence;
/// `forced` marks the source cell whose value is pinned to 1.
#[derive(Debug, Clone, Copy)]
pub(crate) struct KernelCell {
    pub value: f64,
    pub ds2: f64,
    pub di2: f64,
    pub forced: bool,
}

pub(crate) fn kernel_cells(
    image: &IntensityImage,
    source: SparsePoint,
    params: &KernelParams,
    half_size: usize,
) -> Vec<KernelCell> {
    let (row0, col0, rows, cols) =
        patch_rect(source.row, source.col, half_size, image.height(), image.width());
    let d_int = if params.path_accum {
        minimax_intensity_distance(image, source, row0, col0, rows, cols)
    } else {
        (0..rows * cols)
            .map(|cell| {
                let pixel = (row0 + cell / cols, col0 + cell % cols);
                image.max_channel_diff(pixel, (source.row, source.col))
            })
            .collect()
    };
    let center = (source.row - row0) * cols + (source.col - col0);
    (0..rows * cols)
        .map(|cell| {
            if cell == center {
                return KernelCell { value: 1.0, ds2: 0.0, di2: 0.0, forced: true };
            }
            let (r, c) = (row0 + cell / cols, col0 + cell % cols);
            let dr = r as f64 - source.row as f64;
            let dc = c as f64 - source.col as f64;
            let ds2 = dr * dr + dc * dc;
            let di2 = d_int[cell] * d_int[cell];
            let z = params.bias - ds2 / (params.alpha * params.alpha) - di2 / (params.beta * params.beta);
            KernelCell { value: sigmoid(z), ds2, di2, forced: false }
        })
        .collect()
}

/// Scores the patch around one source with the parametric kernel.
pub fn kernel_confidence(
    image: &IntensityImage,
    source: SparsePoint,
    source_index: usize,
    params: &KernelParams,
    half_size: usize,
) -> Result<ConfidencePatch> {
    check_source_in_image(image, source)?;
    let values = kernel_cells(image, source, params, half_size)
        .into_iter()
        .map(|c| c.value)
        .collect();
    ConfidencePatch::new(source_index, source, half_size, image.height(), image.width(), values)
}

/// f64 ordered for the minimax heap; weights are always finite.
#[derive(PartialEq, PartialOrd)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).expect("finite weights")
    }
}

/// Smallest achievable "worst edge" along 4-connected paths from the source to
/// each patch cell, where an edge weighs the per-channel intensity difference
/// of its endpoints. Paths stay inside the patch footprint.
fn minimax_intensity_distance(
    image: &IntensityImage,
    source: SparsePoint,
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; rows * cols];
    let center = (source.row - row0) * cols + (source.col - col0);
    dist[center] = 0.0;
    let mut heap: BinaryHeap<(std::cmp::Reverse<OrdF64>, usize)> = BinaryHeap::new();
    heap.push((std::cmp::Reverse(OrdF64(0.0)), center));
    while let Some((std::cmp::Reverse(OrdF64(d)), cell)) = heap.pop() {
        if d > dist[cell] {
            continue;
        }
        let (r, c) = (cell / cols, cell % cols);
        for (nr, nc) in neighbors4(r, c, rows, cols) {
            let ncell = nr * cols + nc;
            let edge = image.max_channel_diff((row0 + r, col0 + c), (row0 + nr, col0 + nc));
            let nd = d.max(edge);
            if nd < dist[ncell] {
                dist[ncell] = nd;
                heap.push((std::cmp::Reverse(OrdF64(nd)), ncell));
            }
        }
    }
    dist
}

// ---------------------------------------------------------------------------
// Aggregation

/// Combines overlapping patches into dense suggestion and confidence maps.
///
/// Suggested values are the confidence-weighted average of the contributing
/// sources; confidence is the per-pixel maximum. Both reductions run in
/// ascending source-index order, which makes the result bit-exact regardless of
/// the order patches are passed in. Pixels covered by no patch (or only by
/// zero-confidence cells) stay invalid. Every source pixel of `sparse` is
/// forced to its measured value with confidence exactly 1.
pub fn aggregate(
    patches: &[ConfidencePatch],
    sparse: &SparseSignalMap,
) -> Result<(DenseField, DenseField)> {
    let (height, width) = (sparse.height(), sparse.width());
    let mut order: Vec<&ConfidencePatch> = patches.iter().collect();
    order.sort_by_key(|p| p.source_index);
    for pair in order.windows(2) {
        if pair[0].source_index == pair[1].source_index {
            return Err(Error::config(format!(
                "two patches share source index {}",
                pair[0].source_index
            )));
        }
    }
    for patch in &order {
        let declared = sparse.value_at(patch.source_row, patch.source_col);
        if declared != Some(patch.source_value) {
            return Err(Error::config(format!(
                "patch source ({}, {}) with value {} is not in the sparse map",
                patch.source_row, patch.source_col, patch.source_value
            )));
        }
        let (row0, col0, rows, cols) = patch.rect();
        if row0 + rows > height || col0 + cols > width {
            return Err(Error::config(format!(
                "patch footprint ({row0}, {col0}, {rows}, {cols}) leaves the {height}x{width} grid"
            )));
        }
    }

    let mut numerator = vec![0.0f64; height * width];
    let mut denominator = vec![0.0f64; height * width];
    let mut max_conf = vec![0.0f64; height * width];
    for patch in &order {
        for (i, j, conf) in patch.iter() {
            let idx = i * width + j;
            numerator[idx] += conf * patch.source_value;
            denominator[idx] += conf;
            if conf > max_conf[idx] {
                max_conf[idx] = conf;
            }
        }
    }

    let mut expanded = DenseField::empty(height, width, sparse.representation());
    let mut confidence = DenseField::empty(height, width, Representation::Unitless);
    for i in 0..height {
        for j in 0..width {
            let idx = i * width + j;
            if denominator[idx] > 0.0 {
                expanded.set(i, j, numerator[idx] / denominator[idx])?;
                confidence.set(i, j, max_conf[idx].min(1.0))?;
            }
        }
    }
    // Source pixels are exact by definition, not approximately via the blend.
    for p in sparse.points() {
        expanded.set(p.row, p.col, p.value)?;
        confidence.set(p.row, p.col, 1.0)?;
    }
    Ok((expanded, confidence))
}

/// Expands the chosen fraction of sources with the given model and aggregates.
///
/// A seeded shuffle picks `round(sample_rate * n)` sources (at least one) for
/// expansion; the rest pass through as bare source pixels. `sample_rate = 1`
/// expands everything and does not consume randomness.
pub fn expand(
    image: &IntensityImage,
    sparse: &SparseSignalMap,
    model: &ExpansionModel,
    sample_rate: f64,
    seed: u64,
) -> Result<(DenseField, DenseField)> {
    let patches = expand_patches(image, sparse, model, sample_rate, seed)?;
    aggregate(&patches, sparse)
}

/// The patch-building half of [`expand`], exposed for the loss and the tests.
pub fn expand_patches(
    image: &IntensityImage,
    sparse: &SparseSignalMap,
    model: &ExpansionModel,
    sample_rate: f64,
    seed: u64,
) -> Result<Vec<ConfidencePatch>> {
    if image.height() != sparse.height() || image.width() != sparse.width() {
        return Err(Error::config(format!(
            "image is {}x{} but sparse map is {}x{}",
            image.height(),
            image.width(),
            sparse.height(),
            sparse.width()
        )));
    }
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(Error::config(format!("sample_rate must be in (0, 1], got {sample_rate}")));
    }
    let chosen = choose_sources(sparse.len(), sample_rate, seed);
    sparse
        .points()
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            if !chosen[k] {
                return Ok(ConfidencePatch::singleton(k, p));
            }
            match model {
                ExpansionModel::Adhoc(cfg) => adhoc_expand(image, p, k, cfg),
                ExpansionModel::Kernel { params, half_size } => {
                    kernel_confidence(image, p, k, params, *half_size)
                }
            }
        })
        .collect()
}

/// Seeded choice of which sources get expanded.
fn choose_sources(n: usize, sample_rate: f64, seed: u64) -> Vec<bool> {
    if n == 0 {
        return Vec::new();
    }
    let count = ((sample_rate * n as f64).round() as usize).clamp(1, n);
    if count == n {
        return vec![true; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut chosen = vec![false; n];
    for &k in &order[..count] {
        chosen[k] = true;
    }
    chosen
}

// ---------------------------------------------------------------------------
// Training loss

/// Weights of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the confidence-weighted fit term.
    pub fit: f64,
    /// Weight of the confidence magnitude term.
    pub confidence: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { fit: 1.0, confidence: 0.01 }
    }
}

impl LossWeights {
    pub fn new(fit: f64, confidence: f64) -> Result<Self> {
        if !fit.is_finite() || fit < 0.0 || !confidence.is_finite() || confidence < 0.0 {
            return Err(Error::config(format!(
                "loss weights must be finite and >= 0, got ({fit}, {confidence})"
            )));
        }
        Ok(LossWeights { fit, confidence })
    }
}

/// Loss value with its two terms and the support size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean of C * |target - suggestion| over the support.
    pub fit_term: f64,
    /// Mean of C over the support.
    pub confidence_term: f64,
    pub support: usize,
}

/// Scores expanded maps against dense ground truth.
///
/// The support is every pixel with valid ground truth and positive confidence;
/// both terms are averaged over it. During training the confidence factor of
/// the fit term is treated as a constant (its gradient is cut), so lowering
/// confidence cannot buy a better fit term.
pub fn expansion_loss(
    expanded: &DenseField,
    confidence: &DenseField,
    target: &DenseField,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if !expanded.same_shape(confidence) || !expanded.same_shape(target) {
        return Err(Error::config("loss inputs must share one shape"));
    }
    if confidence.representation() != Representation::Unitless {
        return Err(Error::Representation {
            expected: Representation::Unitless.name().to_string(),
            found: confidence.representation().name().to_string(),
        });
    }
    let mut fit = 0.0;
    let mut conf = 0.0;
    let mut support = 0usize;
    for (i, j, c) in confidence.iter_valid() {
        if c <= 0.0 {
            continue;
        }
        let Some(t) = target.get(i, j) else { continue };
        let Some(g) = expanded.get(i, j) else {
            return Err(Error::config(format!(
                "pixel ({i}, {j}) has confidence {c} but no suggested value"
            )));
        };
        fit += c * (t - g).abs();
        conf += c;
        support += 1;
    }
    if support == 0 {
        return Err(Error::config("loss support is empty: no pixel has ground truth and positive confidence"));
    }
    let fit_term = fit / support as f64;
    let confidence_term = conf / support as f64;
    Ok(LossBreakdown {
        total: weights.fit * fit_term + weights.confidence * confidence_term,
        fit_term,
        confidence_term,
        support,
    })
}

/// Gradient of [`expansion_loss`] with respect to the kernel parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelGradient {
    pub alpha: f64,
    pub beta: f64,
    pub bias: f64,
}

/// Evaluates the loss and its analytic parameter gradient for one scene.
///
/// `chosen` masks which sources are expanded (None expands all); unchosen
/// sources contribute their bare pixel. The fit term's confidence factor and
/// the forced values at source pixels are constants, so they contribute no
/// gradient; the confidence term differentiates through the per-pixel maximum
/// (ties resolve to the lowest source index).
pub fn loss_and_gradient(
    image: &IntensityImage,
    sparse: &SparseSignalMap,
    target: &DenseField,
    params: &KernelParams,
    half_size: usize,
    weights: &LossWeights,
    chosen: Option<&[bool]>,
) -> Result<(LossBreakdown, KernelGradient)> {
    if image.height() != sparse.height() || image.width() != sparse.width() {
        return Err(Error::config("image and sparse map shapes differ"));
    }
    if target.height() != sparse.height() || target.width() != sparse.width() {
        return Err(Error::config("target and sparse map shapes differ"));
    }
    if let Some(mask) = chosen {
        if mask.len() != sparse.len() {
            return Err(Error::config("chosen mask length must equal the source count"));
        }
    }
    let (height, width) = (sparse.height(), sparse.width());
    let n = height * width;

    struct SourceCells {
        row0: usize,
        col0: usize,
        cols: usize,
        value: f64,
        cells: Vec<KernelCell>,
    }
    let singleton = |p: SparsePoint| SourceCells {
        row0: p.row,
        col0: p.col,
        cols: 1,
        value: p.value,
        cells: vec![KernelCell { value: 1.0, ds2: 0.0, di2: 0.0, forced: true }],
    };
    let sources: Vec<SourceCells> = sparse
        .points()
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            if chosen.map_or(true, |m| m[k]) {
                let (row0, col0, _rows, cols) = patch_rect(p.row, p.col, half_size, height, width);
                SourceCells { row0, col0, cols, value: p.value, cells: kernel_cells(image, p, params, half_size) }
            } else {
                singleton(p)
            }
        })
        .collect();

    // Forward pass: weighted blend, max-confidence with argmax, forced sources.
    let mut numerator = vec![0.0f64; n];
    let mut denominator = vec![0.0f64; n];
    let mut max_conf = vec![0.0f64; n];
    let mut argmax: Vec<Option<(usize, usize)>> = vec![None; n]; // (source k, cell)
    for (k, s) in sources.iter().enumerate() {
        for (cell, kc) in s.cells.iter().enumerate() {
            let idx = (s.row0 + cell / s.cols) * width + (s.col0 + cell % s.cols);
            numerator[idx] += kc.value * s.value;
            denominator[idx] += kc.value;
            if kc.value > max_conf[idx] {
                max_conf[idx] = kc.value;
                argmax[idx] = Some((k, cell));
            }
        }
    }
    let mut source_pixel = vec![false; n];
    let mut source_value = vec![0.0f64; n];
    for p in sparse.points() {
        let idx = p.row * width + p.col;
        source_pixel[idx] = true;
        source_value[idx] = p.value;
    }

    // Loss over the support, collecting per-pixel coefficients for the backward
    // pass. Forced pixels join the support but have constant value/confidence.
    let mut fit = 0.0;
    let mut conf_sum = 0.0;
    let mut support = 0usize;
    let mut in_support = vec![false; n];
    let mut gexp = vec![0.0f64; n];
    for idx in 0..n {
        let (i, j) = (idx / width, idx % width);
        let Some(t) = target.get(i, j) else { continue };
        let (g, c) = if source_pixel[idx] {
            (source_value[idx], 1.0)
        } else if denominator[idx] > 0.0 && max_conf[idx] > 0.0 {
            (numerator[idx] / denominator[idx], max_conf[idx])
        } else {
            continue;
        };
        in_support[idx] = true;
        gexp[idx] = g;
        fit += c * (t - g).abs();
        conf_sum += c;
        support += 1;
    }
    if support == 0 {
        return Err(Error::config("loss support is empty: no pixel has ground truth and positive confidence"));
    }
    let inv = 1.0 / support as f64;
    let breakdown = LossBreakdown {
        total: weights.fit * fit * inv + weights.confidence * conf_sum * inv,
        fit_term: fit * inv,
        confidence_term: conf_sum * inv,
        support,
    };

    // Backward pass. d(cell)/d(theta) = sigma'(z) * dz/d(theta) with
    // dz/dbias = 1, dz/dalpha = 2 ds^2 / alpha^3, dz/dbeta = 2 di^2 / beta^3.
    let cell_grad = |kc: &KernelCell| -> Option<(f64, f64, f64)> {
        if kc.forced {
            return None;
        }
        let sp = kc.value * (1.0 - kc.value);
        Some((
            sp * 2.0 * kc.ds2 / (params.alpha * params.alpha * params.alpha),
            sp * 2.0 * kc.di2 / (params.beta * params.beta * params.beta),
            sp,
        ))
    };
    let mut grad = KernelGradient { alpha: 0.0, beta: 0.0, bias: 0.0 };
    // Fit term: flows through the blended value only (confidence detached).
    for s in &sources {
        for (cell, kc) in s.cells.iter().enumerate() {
            let idx = (s.row0 + cell / s.cols) * width + (s.col0 + cell % s.cols);
            if !in_support[idx] || source_pixel[idx] {
                continue;
            }
            let Some((da, db, dbias)) = cell_grad(kc) else { continue };
            let t = target.get(idx / width, idx % width).expect("in support");
            let sign = (gexp[idx] - t).signum() * if gexp[idx] == t { 0.0 } else { 1.0 };
            let coeff = weights.fit * inv * max_conf[idx] * sign * (s.value - gexp[idx]) / denominator[idx];
            grad.alpha += coeff * da;
            grad.beta += coeff * db;
            grad.bias += coeff * dbias;
        }
    }
    // Confidence term: flows through the arg-max cell of each support pixel.
    for idx in 0..n {
        if !in_support[idx] || source_pixel[idx] {
            continue;
        }
        let Some((k, cell)) = argmax[idx] else { continue };
        let Some((da, db, dbias)) = cell_grad(&sources[k].cells[cell]) else { continue };
        let coeff = weights.confidence * inv;
        grad.alpha += coeff * da;
        grad.beta += coeff * db;
        grad.bias += coeff * dbias;
    }
    Ok((breakdown, grad))
}

// ---------------------------------------------------------------------------
// Trainer

/// One training example: an image, its sparse measurements, dense ground truth.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub image: IntensityImage,
    pub sparse: SparseSignalMap,
    pub target: DenseField,
}

/// Gradient-descent settings for [`train_kernel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Fraction of sources expanded per scene and iteration, in (0, 1].
    pub sample_rate: f64,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::config(format!(
                "sample_rate must be in (0, 1], got {}",
                self.sample_rate
            )));
        }
        Ok(())
    }
}

const MIN_KERNEL_SCALE: f64 = 1e-3;

/// Trains the kernel by plain gradient descent over the dataset.
///
/// Returns the best parameters seen (so the final loss never exceeds the
/// initial one) together with the training curve of full-dataset losses, one
/// entry per iteration plus the final state. A non-finite loss or gradient
/// aborts with the iteration index.
pub fn train_kernel(
    dataset: &[TrainScene],
    init: &KernelParams,
    half_size: usize,
    cfg: &TrainingConfig,
) -> Result<(KernelParams, Vec<(usize, f64)>)> {
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    cfg.validate()?;
    let full_loss = |params: &KernelParams| -> Result<f64> {
        let mut total = 0.0;
        for scene in dataset {
            let (b, _) = loss_and_gradient(
                &scene.image,
                &scene.sparse,
                &scene.target,
                params,
                half_size,
                &cfg.weights,
                None,
            )?;
            total += b.total;
        }
        Ok(total / dataset.len() as f64)
    };

    let mut params = *init;
    let mut curve = Vec::with_capacity(cfg.iterations + 1);
    let mut best = (params, f64::INFINITY);
    for iter in 0..cfg.iterations {
        let loss = full_loss(&params)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("training diverged at iteration {iter}: loss {loss}")));
        }
        curve.push((iter, loss));
        if loss < best.1 {
            best = (params, loss);
        }
        let mut step = KernelGradient { alpha: 0.0, beta: 0.0, bias: 0.0 };
        for (scene_idx, scene) in dataset.iter().enumerate() {
            let chosen = if cfg.sample_rate >= 1.0 {
                None
            } else {
                Some(training_sample(
                    scene.sparse.len(),
                    cfg.sample_rate,
                    cfg.seed,
                    iter,
                    scene_idx,
                ))
            };
            let (_, g) = loss_and_gradient(
                &scene.image,
                &scene.sparse,
                &scene.target,
                &params,
                half_size,
                &cfg.weights,
                chosen.as_deref(),
            )?;
            step.alpha += g.alpha;
            step.beta += g.beta;
            step.bias += g.bias;
        }
        let scale = cfg.learning_rate / dataset.len() as f64;
        if !(step.alpha.is_finite() && step.beta.is_finite() && step.bias.is_finite()) {
            return Err(Error::numerical(format!("training diverged at iteration {iter}: non-finite gradient")));
        }
        params.alpha = (params.alpha - scale * step.alpha).max(MIN_KERNEL_SCALE);
        params.beta = (params.beta - scale * step.beta).max(MIN_KERNEL_SCALE);
        params.bias -= scale * step.bias;
        if !params.bias.is_finite() {
            return Err(Error::numerical(format!("training diverged at iteration {iter}: non-finite bias")));
        }
    }
    let final_loss = full_loss(&params)?;
    curve.push((cfg.iterations, final_loss));
    if final_loss < best.1 {
        best = (params, final_loss);
    }
    Ok((best.0, curve))
}

fn training_sample(n: usize, sample_rate: f64, seed: u64, iter: usize, scene_idx: usize) -> Vec<bool> {
    // Distinct stream per (seed, iteration, scene) so resampling is deterministic.
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((iter as u64) << 24)
        .wrapping_add(scene_idx as u64);
    choose_sources(n, sample_rate, mixed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_image(h: usize, w: usize, v: f64) -> IntensityImage {
        IntensityImage::constant(h, w, 1, v).unwrap()
    }

    fn one_source(h: usize, w: usize, row: usize, col: usize, value: f64) -> SparseSignalMap {
        SparseSignalMap::new(
            h,
            w,
            Representation::DepthMeters,
            vec![SparsePoint { row, col, value }],
        )
        .unwrap()
    }

    #[test]
    fn adhoc_fills_whole_patch_on_constant_image_with_zero_tau() {
        let img = flat_image(9, 9, 0.5);
        let cfg = AdhocConfig::new(2, 0.0).unwrap();
        let p = adhoc_expand(&img, SparsePoint { row: 4, col: 4, value: 3.0 }, 0, &cfg).unwrap();
        assert!(p.iter().all(|(_, _, v)| v == 1.0));
        assert_eq!(p.iter().count(), 25);
    }

    #[test]
    fn adhoc_stops_at_step_edge() {
        // Columns 6.. are brighter than tau allows; center sits at column 4.
        let mut img = flat_image(9, 9, 0.2);
        for i in 0..9 {
            for j in 6..9 {
                img.set_channel(i, j, 0, 0.9).unwrap();
            }
        }
        let cfg = AdhocConfig::new(3, 0.1).unwrap();
        let p = adhoc_expand(&img, SparsePoint { row: 4, col: 4, value: 3.0 }, 0, &cfg).unwrap();
        for (i, j, v) in p.iter() {
            let expect = if j >= 6 { 0.0 } else { 1.0 };
            assert_eq!(v, expect, "cell ({i}, {j})");
        }
    }

    #[test]
    fn adhoc_requires_connectivity_not_just_similarity() {
        // A bright ring seals the center; same-colored cells outside it stay 0.
        let mut img = flat_image(9, 9, 0.2);
        for k in 3..=5 {
            for &(i, j) in &[(2usize, k), (6, k), (k, 2), (k, 6)] {
                img.set_channel(i, j, 0, 0.9).unwrap();
            }
        }
        img.set_channel(2, 2, 0, 0.9).unwrap();
        img.set_channel(2, 6, 0, 0.9).unwrap();
        img.set_channel(6, 2, 0, 0.9).unwrap();
        img.set_channel(6, 6, 0, 0.9).unwrap();
        let cfg = AdhocConfig::new(4, 0.1).unwrap();
        let p = adhoc_expand(&img, SparsePoint { row: 4, col: 4, value: 3.0 }, 0, &cfg).unwrap();
        assert_eq!(p.confidence_at(4, 4), Some(1.0));
        assert_eq!(p.confidence_at(3, 4), Some(1.0)); // inside the ring
        assert_eq!(p.confidence_at(0, 4), Some(0.0)); // outside, same color, sealed off
        assert_eq!(p.confidence_at(2, 4), Some(0.0)); // the ring itself
    }

    #[test]
    fn kernel_center_is_exactly_one_and_neutral_params_give_half() {
        let img = flat_image(9, 9, 0.5);
        let params = KernelParams::new(1e6, 1e6, 0.0, false).unwrap();
        let p = kernel_confidence(&img, SparsePoint { row: 4, col: 4, value: 2.0 }, 0, &params, 2).unwrap();
        assert_eq!(p.confidence_at(4, 4), Some(1.0));
        for (i, j, v) in p.iter() {
            if (i, j) != (4, 4) {
                assert!((v - 0.5).abs() < 1e-9, "cell ({i}, {j}) = {v}");
            }
        }
    }

    #[test]
    fn kernel_confidence_decreases_with_both_distances() {
        let mut img = flat_image(9, 9, 0.2);
        img.set_channel(4, 6, 0, 0.7).unwrap();
        let params = KernelParams::new(3.0, 0.1, 2.0, false).unwrap();
        let p = kernel_confidence(&img, SparsePoint { row: 4, col: 4, value: 2.0 }, 0, &params, 3).unwrap();
        // Spatially: further cells along a clean row score lower.
        let near = p.confidence_at(4, 5).unwrap();
        let far = p.confidence_at(4, 7).unwrap();
        assert!(near > far, "{near} vs {far}");
        // Intensity: same spatial offset, different intensity -> lower.
        let clean = p.confidence_at(4, 2).unwrap(); // offset 2, same color
        let dirty = p.confidence_at(4, 6).unwrap(); // offset 2, different color
        assert!(clean > dirty, "{clean} vs {dirty}");
    }

    #[test]
    fn minimax_path_distance_respects_barriers() {
        // Same-colored cell behind a bright wall: direct distance is 0 but every
        // path crosses the wall, so path accumulation sees the wall contrast.
        let mut img = flat_image(5, 7, 0.2);
        for i in 0..5 {
            img.set_channel(i, 4, 0, 0.9).unwrap();
        }
        let source = SparsePoint { row: 2, col: 1, value: 2.0 };
        let direct = KernelParams::new(100.0, 0.1, 4.0, false).unwrap();
        let path = KernelParams::new(100.0, 0.1, 4.0, true).unwrap();
        let pd = kernel_confidence(&img, source, 0, &direct, 6).unwrap();
        let pp = kernel_confidence(&img, source, 0, &path, 6).unwrap();
        let behind = (2usize, 6usize);
        assert!(pd.confidence_at(behind.0, behind.1).unwrap() > 0.9);
        assert!(pp.confidence_at(behind.0, behind.1).unwrap() < 0.1);
        // In front of the wall both agree.
        assert!((pd.confidence_at(2, 3).unwrap() - pp.confidence_at(2, 3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn aggregate_blends_by_confidence_and_takes_max() {
        // Three patches over one pixel: values 50, 100, 100 with confidences
        // 1, 0.001, 0.001 -> blend 50.2/1.002, confidence max = 1.
        let sparse = SparseSignalMap::new(
            3,
            5,
            Representation::DisparityPixels,
            vec![
                SparsePoint { row: 1, col: 1, value: 50.0 },
                SparsePoint { row: 1, col: 2, value: 100.0 },
                SparsePoint { row: 1, col: 3, value: 100.0 },
            ],
        )
        .unwrap();
        let patch = |k: usize, p: SparsePoint, left: f64, mid: f64, right: f64| {
            let mut v = vec![0.0; 9];
            v[3] = left;
            v[4] = mid;
            v[5] = right;
            ConfidencePatch::new(k, p, 1, 3, 5, v).unwrap()
        };
        let pts = sparse.points();
        let patches = vec![
            patch(0, pts[0], 0.0, 1.0, 1.0),   // middle row covers cols 0..=2
            patch(1, pts[1], 0.001, 1.0, 0.5), // cols 1..=3
            patch(2, pts[2], 0.001, 1.0, 0.5), // cols 2..=4
        ];
        let (gexp, conf) = aggregate(&patches, &sparse).unwrap();
        // (1,2) is a source pixel, so it is forced.
        assert_eq!(gexp.get(1, 2), Some(100.0));
        assert_eq!(conf.get(1, 2), Some(1.0));
        // (1,0) is covered only by patch0's left cell with confidence 0 -> invalid.
        assert_eq!(gexp.get(1, 0), None);
        // (1,4): only patch2's right cell, conf 0.5, value 100.
        assert_eq!(gexp.get(1, 4), Some(100.0));
        assert_eq!(conf.get(1, 4), Some(0.5));
    }

    #[test]
    fn aggregate_weighted_mean_matches_hand_computation() {
        // One confident nearby source (50) against two distant doubtful ones
        // (100 each at confidence 0.001): the blend stays near 50 while a plain
        // mean of the suggestions would jump to 83.3.
        let sparse = SparseSignalMap::new(
            1,
            5,
            Representation::DisparityPixels,
            vec![
                SparsePoint { row: 0, col: 0, value: 50.0 },
                SparsePoint { row: 0, col: 2, value: 100.0 },
                SparsePoint { row: 0, col: 4, value: 100.0 },
            ],
        )
        .unwrap();
        let pts = sparse.points();
        // half_size 4 on a 1x5 grid covers every column for every source.
        let mk = |k: usize, p: SparsePoint, vals: [f64; 5]| {
            ConfidencePatch::new(k, p, 4, 1, 5, vals.to_vec()).unwrap()
        };
        let patches = vec![
            mk(0, pts[0], [1.0, 1.0, 0.0, 0.0, 0.0]),
            mk(1, pts[1], [0.0, 0.001, 1.0, 0.0, 0.0]),
            mk(2, pts[2], [0.0, 0.001, 0.0, 0.0, 1.0]),
        ];
        let (gexp, conf) = aggregate(&patches, &sparse).unwrap();
        // Pixel (0,1): num = 50*1 + 100*0.001 + 100*0.001, den = 1.002.
        let expect = (50.0 + 0.1 + 0.1) / 1.002;
        assert!((gexp.get(0, 1).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 50.0998).abs() < 1e-4);
        assert_eq!(conf.get(0, 1), Some(1.0));
    }

    #[test]
    fn aggregate_is_order_invariant_bitwise() {
        let sparse = SparseSignalMap::new(
            6,
            6,
            Representation::DepthMeters,
            vec![
                SparsePoint { row: 1, col: 1, value: 3.0 },
                SparsePoint { row: 1, col: 3, value: 7.0 },
                SparsePoint { row: 3, col: 2, value: 11.0 },
            ],
        )
        .unwrap();
        let img = flat_image(6, 6, 0.4);
        let params = KernelParams::new(2.5, 0.3, 1.0, false).unwrap();
        let patches: Vec<_> = sparse
            .points()
            .iter()
            .enumerate()
            .map(|(k, &p)| kernel_confidence(&img, p, k, &params, 2).unwrap())
            .collect();
        let mut reversed = patches.clone();
        reversed.reverse();
        let a = aggregate(&patches, &sparse).unwrap();
        let b = aggregate(&reversed, &sparse).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_rejects_foreign_patch() {
        let sparse = one_source(4, 4, 1, 1, 5.0);
        let foreign = ConfidencePatch::singleton(0, SparsePoint { row: 2, col: 2, value: 5.0 });
        assert!(aggregate(&[foreign], &sparse).is_err());
        let wrong_value = ConfidencePatch::singleton(0, SparsePoint { row: 1, col: 1, value: 6.0 });
        assert!(aggregate(&[wrong_value], &sparse).is_err());
    }

    #[test]
    fn expand_forces_source_pixels_exactly() {
        let img = flat_image(8, 8, 0.5);
        let sparse = SparseSignalMap::new(
            8,
            8,
            Representation::DepthMeters,
            vec![
                SparsePoint { row: 2, col: 2, value: 4.0 },
                SparsePoint { row: 2, col: 4, value: 9.0 },
                SparsePoint { row: 5, col: 5, value: 6.5 },
            ],
        )
        .unwrap();
        let model = ExpansionModel::Kernel {
            params: KernelParams::new(3.0, 0.2, 1.5, false).unwrap(),
            half_size: 3,
        };
        let (gexp, conf) = expand(&img, &sparse, &model, 1.0, 0).unwrap();
        for p in sparse.points() {
            assert_eq!(gexp.get(p.row, p.col), Some(p.value));
            assert_eq!(conf.get(p.row, p.col), Some(1.0));
        }
    }

    #[test]
    fn expand_subsampling_keeps_sources_and_shrinks_coverage() {
        let img = flat_image(16, 16, 0.5);
        let points: Vec<_> = (0..8)
            .map(|k| SparsePoint { row: 2 * k, col: 2 * k, value: 1.0 + k as f64 })
            .collect();
        let sparse = SparseSignalMap::new(16, 16, Representation::DepthMeters, points).unwrap();
        let model = ExpansionModel::Adhoc(AdhocConfig::new(2, 1.0).unwrap());
        let (full, _) = expand(&img, &sparse, &model, 1.0, 7).unwrap();
        let (sub, subc) = expand(&img, &sparse, &model, 0.25, 7).unwrap();
        assert!(sub.valid_count() < full.valid_count());
        for p in sparse.points() {
            assert_eq!(sub.get(p.row, p.col), Some(p.value));
            assert_eq!(subc.get(p.row, p.col), Some(1.0));
        }
        // Deterministic for a fixed seed.
        let (sub2, _) = expand(&img, &sparse, &model, 0.25, 7).unwrap();
        assert_eq!(sub, sub2);
        // A different seed picks a different subset (with 8 choose 2 room).
        let (sub3, _) = expand(&img, &sparse, &model, 0.25, 8).unwrap();
        assert_ne!(sub, sub3);
    }

    #[test]
    fn loss_reduces_to_confidence_term_on_perfect_expansion() {
        let img = flat_image(7, 7, 0.5);
        let sparse = one_source(7, 7, 3, 3, 5.0);
        let model = ExpansionModel::Kernel {
            params: KernelParams::new(4.0, 0.2, 1.0, false).unwrap(),
            half_size: 2,
        };
        let (gexp, conf) = expand(&img, &sparse, &model, 1.0, 0).unwrap();
        let target = DenseField::filled(7, 7, Representation::DepthMeters, 5.0).unwrap();
        let weights = LossWeights { fit: 1.0, confidence: 0.01 };
        let b = expansion_loss(&gexp, &conf, &target, &weights).unwrap();
        assert!(b.fit_term.abs() < 1e-12);
        assert!((b.total - 0.01 * b.confidence_term).abs() < 1e-15);
        assert_eq!(b.support, 25);
    }

    #[test]
    fn loss_errors_on_empty_support() {
        let gexp = DenseField::empty(4, 4, Representation::DepthMeters);
        let conf = DenseField::empty(4, 4, Representation::Unitless);
        let target = DenseField::filled(4, 4, Representation::DepthMeters, 1.0).unwrap();
        assert!(expansion_loss(&gexp, &conf, &target, &LossWeights::default()).is_err());
    }

    #[test]
    fn params_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kernel.txt");
        let p = KernelParams::new(7.25, 0.125, -0.5, true).unwrap();
        p.save(&path).unwrap();
        assert_eq!(KernelParams::load(&path).unwrap(), p);
        std::fs::write(&path, "alpha=1\nbeta=1\nbias=0\n").unwrap();
        assert!(KernelParams::load(&path).is_err());
        std::fs::write(&path, "alpha=1\nbeta=1\nbias=0\npath_accum=1\nextra=2\n").unwrap();
        assert!(KernelParams::load(&path).is_err());
    }
}
