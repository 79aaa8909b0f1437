//! Synthetic desk-scale fixtures: piecewise-planar scenes, corrupted
//! predictions, sparse sampling patterns and matching cost volumes.
//!
//! The scenes are a slanted ground ramp with axis-aligned boxes in front of
//! it. That is deliberately minimal geometry: it still exhibits homogeneous
//! planes (where dense predictors drift), depth edges (where they fatten), and
//! slanted surfaces, while keeping every quantity hand-checkable. Intensity is
//! tied to surface identity so that color edges coincide with depth edges.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{backproject, CameraIntrinsics};
use crate::field::{CostVolume, DenseField, IntensityImage, Representation, SparsePoint, SparseSignalMap};
use crate::{io, Error, Result};

/// Axis-aligned constant-depth rectangle in front of the ground ramp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSpec {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub depth: f64,
    pub color: f64,
}

/// Full scene description; `validate` checks every geometric invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub cu: f64,
    pub cv: f64,
    pub baseline: f64,
    /// Ramp depth at the top and bottom image rows; linear in between.
    pub depth_top: f64,
    pub depth_bottom: f64,
    /// Lateral slant: depth shift per column offset from the image center.
    pub tilt_per_col: f64,
    pub plane_color: f64,
    pub boxes: Vec<BoxSpec>,
    /// Amplitude of the uniform per-pixel intensity noise.
    pub texture_noise: f64,
    pub far_plane: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Ramp depth at (i, j), before occlusion by boxes.
    pub fn plane_depth(&self, i: usize, j: usize) -> f64 {
        let t = i as f64 / (self.height - 1) as f64;
        let center = (self.width - 1) as f64 / 2.0;
        self.depth_top + (self.depth_bottom - self.depth_top) * t + self.tilt_per_col * (j as f64 - center)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::config(format!("scene needs at least 2x2 pixels, got {}x{}", self.height, self.width)));
        }
        if !self.focal.is_finite() || self.focal <= 0.0 || !self.baseline.is_finite() || self.baseline <= 0.0 {
            return Err(Error::config("focal length and baseline must be finite and > 0"));
        }
        if !self.cu.is_finite() || !self.cv.is_finite() {
            return Err(Error::config("principal point must be finite"));
        }
        if !self.far_plane.is_finite() || self.far_plane <= 0.0 {
            return Err(Error::config("far plane must be finite and > 0"));
        }
        for (i, j) in [(0, 0), (0, self.width - 1), (self.height - 1, 0), (self.height - 1, self.width - 1)] {
            let d = self.plane_depth(i, j);
            if !(d > 0.0 && d < self.far_plane) {
                return Err(Error::config(format!(
                    "ramp depth {d} at corner ({i}, {j}) leaves (0, {})",
                    self.far_plane
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.plane_color) {
            return Err(Error::config(format!("plane color {} outside [0, 1]", self.plane_color)));
        }
        if !self.texture_noise.is_finite() || self.texture_noise < 0.0 {
            return Err(Error::config(format!("texture noise {} must be >= 0", self.texture_noise)));
        }
        for (idx, b) in self.boxes.iter().enumerate() {
            if b.height == 0 || b.width == 0 || b.row + b.height > self.height || b.col + b.width > self.width {
                return Err(Error::config(format!("box {idx} leaves the {}x{} image", self.height, self.width)));
            }
            if !(b.depth > 0.0 && b.depth < self.far_plane) {
                return Err(Error::config(format!("box {idx} depth {} leaves (0, {})", b.depth, self.far_plane)));
            }
            if !(0.0..=1.0).contains(&b.color) {
                return Err(Error::config(format!("box {idx} color {} outside [0, 1]", b.color)));
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.focal, self.cu, self.cv, self.baseline)
    }

    /// Desk-scale default: a 48x64 ramp from 20 m down to 8 m with two boxes.
    pub fn desk_default() -> Self {
        SceneSpec {
            height: 48,
            width: 64,
            focal: 64.0,
            cu: 31.5,
            cv: 23.5,
            baseline: 0.5,
            depth_top: 20.0,
            depth_bottom: 8.0,
            tilt_per_col: 0.02,
            plane_color: 0.25,
            boxes: vec![
                BoxSpec { row: 8, col: 10, height: 14, width: 16, depth: 5.0, color: 0.65 },
                BoxSpec { row: 26, col: 34, height: 16, width: 20, depth: 3.5, color: 0.9 },
            ],
            texture_noise: 0.03,
            far_plane: 100.0,
            seed: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pairs = io::read_kv(path)?;
        let mut spec = SceneSpec::desk_default();
        spec.boxes.clear();
        let mut boxes: Vec<(usize, BoxSpec)> = Vec::new();
        for (k, v) in &pairs {
            if let Some(number) = k.strip_prefix("box") {
                let idx: usize = number
                    .parse()
                    .map_err(|_| Error::config(format!("bad box key {k:?}")))?;
                boxes.push((idx, parse_box(v)?));
                continue;
            }
            match k.as_str() {
                "height" => spec.height = parse_num(k, v)?,
                "width" => spec.width = parse_num(k, v)?,
                "focal" => spec.focal = parse_num(k, v)?,
                "cu" => spec.cu = parse_num(k, v)?,
                "cv" => spec.cv = parse_num(k, v)?,
                "baseline" => spec.baseline = parse_num(k, v)?,
                "depth_top" => spec.depth_top = parse_num(k, v)?,
                "depth_bottom" => spec.depth_bottom = parse_num(k, v)?,
                "tilt_per_col" => spec.tilt_per_col = parse_num(k, v)?,
                "plane_color" => spec.plane_color = parse_num(k, v)?,
                "texture_noise" => spec.texture_noise = parse_num(k, v)?,
                "far_plane" => spec.far_plane = parse_num(k, v)?,
                "seed" => spec.seed = parse_num(k, v)?,
                other => return Err(Error::config(format!("unknown scene key {other:?}"))),
            }
        }
        boxes.sort_by_key(|&(idx, _)| idx);
        for (want, (idx, b)) in boxes.into_iter().enumerate() {
            if idx != want {
                return Err(Error::config(format!("box keys must be contiguous from box0, missing box{want}")));
            }
            spec.boxes.push(b);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut pairs = vec![
            ("height".to_string(), self.height.to_string()),
            ("width".to_string(), self.width.to_string()),
            ("focal".to_string(), self.focal.to_string()),
            ("cu".to_string(), self.cu.to_string()),
            ("cv".to_string(), self.cv.to_string()),
            ("baseline".to_string(), self.baseline.to_string()),
            ("depth_top".to_string(), self.depth_top.to_string()),
            ("depth_bottom".to_string(), self.depth_bottom.to_string()),
            ("tilt_per_col".to_string(), self.tilt_per_col.to_string()),
            ("plane_color".to_string(), self.plane_color.to_string()),
            ("texture_noise".to_string(), self.texture_noise.to_string()),
            ("far_plane".to_string(), self.far_plane.to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        for (idx, b) in self.boxes.iter().enumerate() {
            pairs.push((
                format!("box{idx}"),
                format!("{},{},{},{},{},{}", b.row, b.col, b.height, b.width, b.depth, b.color),
            ));
        }
        io::write_kv(path, &pairs)
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value for {key}: {value:?}")))
}

fn parse_box(value: &str) -> Result<BoxSpec> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 6 {
        return Err(Error::config(format!(
            "box value must be row,col,height,width,depth,color, got {value:?}"
        )));
    }
    Ok(BoxSpec {
        row: parse_num("box row", parts[0])?,
        col: parse_num("box col", parts[1])?,
        height: parse_num("box height", parts[2])?,
        width: parse_num("box width", parts[3])?,
        depth: parse_num("box depth", parts[4])?,
        color: parse_num("box color", parts[5])?,
    })
}

/// Renders the scene: intensity (1 channel), ground-truth depth, camera.
///
/// Depth is the nearest covering surface per pixel; intensity is the owning
/// surface's base color plus seeded uniform noise, clamped to [0, 1].
pub fn generate_scene(spec: &SceneSpec) -> Result<(IntensityImage, DenseField, CameraIntrinsics)> {
    spec.validate()?;
    let mut depth = DenseField::empty(spec.height, spec.width, Representation::DepthMeters);
    let mut image = IntensityImage::constant(spec.height, spec.width, 1, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in 0..spec.height {
        for j in 0..spec.width {
            let mut z = spec.plane_depth(i, j);
            let mut color = spec.plane_color;
            for b in &spec.boxes {
                let inside = i >= b.row && i < b.row + b.height && j >= b.col && j < b.col + b.width;
                if inside && b.depth < z {
                    z = b.depth;
                    color = b.color;
                }
            }
            depth.set(i, j, z)?;
            let noisy = if spec.texture_noise > 0.0 {
                (color + spec.texture_noise * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0)
            } else {
                color
            };
            image.set_channel(i, j, 0, noisy)?;
        }
    }
    Ok((image, depth, spec.intrinsics()?))
}

/// Depth step that counts as an object edge when corrupting; safely above the
/// ramp's per-pixel gradient and below any plane/box contrast in the fixtures.
const EDGE_DEPTH_STEP: f64 = 1.0;
/// Regions smaller than this keep their values; the drift bias models dense
/// predictors failing on *large* homogeneous surfaces.
const MIN_BIAS_REGION_AREA: usize = 600;
/// Corrupted depths are clamped here so downstream stages always see a
/// positive prediction.
const MIN_PREDICTION: f64 = 0.01;

/// How to damage ground truth into a plausible dense prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    /// Constant added inside large smooth regions.
    pub bias: f64,
    /// Chebyshev radius of foreground bleeding around depth edges.
    pub edge_radius: usize,
    pub noise_sigma: f64,
    pub outlier_rate: f64,
    pub outlier_magnitude: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn none(seed: u64) -> Self {
        CorruptionSpec { bias: 0.0, edge_radius: 0, noise_sigma: 0.0, outlier_rate: 0.0, outlier_magnitude: 0.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bias", self.bias),
            ("noise_sigma", self.noise_sigma),
            ("outlier_magnitude", self.outlier_magnitude),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.outlier_rate.is_finite() || !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::config(format!("outlier_rate must be in [0, 1], got {}", self.outlier_rate)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pairs = io::read_kv(path)?;
        let mut spec = CorruptionSpec::none(0);
        for (k, v) in &pairs {
            match k.as_str() {
                "bias" => spec.bias = parse_num(k, v)?,
                "edge_radius" => spec.edge_radius = parse_num(k, v)?,
                "noise_sigma" => spec.noise_sigma = parse_num(k, v)?,
                "outlier_rate" => spec.outlier_rate = parse_num(k, v)?,
                "outlier_magnitude" => spec.outlier_magnitude = parse_num(k, v)?,
                "seed" => spec.seed = parse_num(k, v)?,
                other => return Err(Error::config(format!("unknown corruption key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let pairs = vec![
            ("bias".to_string(), self.bias.to_string()),
            ("edge_radius".to_string(), self.edge_radius.to_string()),
            ("noise_sigma".to_string(), self.noise_sigma.to_string()),
            ("outlier_rate".to_string(), self.outlier_rate.to_string()),
            ("outlier_magnitude".to_string(), self.outlier_magnitude.to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        io::write_kv(path, &pairs)
    }
}

/// Pixels whose 4-neighborhood jumps by more than [`EDGE_DEPTH_STEP`].
fn edge_mask(gt: &DenseField) -> Vec<bool> {
    let (h, w) = (gt.height(), gt.width());
    let mut mask = vec![false; h * w];
    let at = |i: usize, j: usize| gt.get(i, j).expect("corrupt requires a fully valid field");
    for i in 0..h {
        for j in 0..w {
            let z = at(i, j);
            let mut edge = false;
            if i > 0 {
                edge |= (z - at(i - 1, j)).abs() > EDGE_DEPTH_STEP;
            }
            if i + 1 < h {
                edge |= (z - at(i + 1, j)).abs() > EDGE_DEPTH_STEP;
            }
            if j > 0 {
                edge |= (z - at(i, j - 1)).abs() > EDGE_DEPTH_STEP;
            }
            if j + 1 < w {
                edge |= (z - at(i, j + 1)).abs() > EDGE_DEPTH_STEP;
            }
            mask[i * w + j] = edge;
        }
    }
    mask
}

/// Damages ground truth into a dense "prediction": constant drift on large
/// smooth regions, foreground bleeding across depth edges, Gaussian noise and
/// a fixed count of sign-flipped outliers. A zero spec returns the input
/// bit-exactly.
pub fn corrupt(gt: &DenseField, spec: &CorruptionSpec) -> Result<DenseField> {
    spec.validate()?;
    let (h, w) = (gt.height(), gt.width());
    if gt.valid_count() != h * w {
        return Err(Error::config("corruption expects a fully valid input field"));
    }
    let mut values: Vec<f64> = (0..h * w).map(|idx| gt.get(idx / w, idx % w).unwrap()).collect();

    if spec.bias != 0.0 {
        let edges = edge_mask(gt);
        let mut label = vec![usize::MAX; h * w];
        let mut sizes = Vec::new();
        for start in 0..h * w {
            if edges[start] || label[start] != usize::MAX {
                continue;
            }
            let id = sizes.len();
            let mut size = 0usize;
            let mut stack = vec![start];
            label[start] = id;
            while let Some(idx) = stack.pop() {
                size += 1;
                let (i, j) = (idx / w, idx % w);
                let push = |ni: usize, nj: usize, stack: &mut Vec<usize>, label: &mut Vec<usize>| {
                    let nidx = ni * w + nj;
                    if !edges[nidx] && label[nidx] == usize::MAX {
                        label[nidx] = id;
                        stack.push(nidx);
                    }
                };
                if i > 0 {
                    push(i - 1, j, &mut stack, &mut label);
                }
                if i + 1 < h {
                    push(i + 1, j, &mut stack, &mut label);
                }
                if j > 0 {
                    push(i, j - 1, &mut stack, &mut label);
                }
                if j + 1 < w {
                    push(i, j + 1, &mut stack, &mut label);
                }
            }
            sizes.push(size);
        }
        for idx in 0..h * w {
            if label[idx] != usize::MAX && sizes[label[idx]] >= MIN_BIAS_REGION_AREA {
                values[idx] += spec.bias;
            }
        }
    }

    if spec.edge_radius > 0 {
        let edges = edge_mask(gt);
        let r = spec.edge_radius;
        let snapshot = values.clone();
        for i in 0..h {
            for j in 0..w {
                let (i0, i1) = (i.saturating_sub(r), (i + r + 1).min(h));
                let (j0, j1) = (j.saturating_sub(r), (j + r + 1).min(w));
                let near_edge = (i0..i1).any(|ni| (j0..j1).any(|nj| edges[ni * w + nj]));
                if !near_edge {
                    continue;
                }
                let mut nearest = snapshot[i * w + j];
                for ni in i0..i1 {
                    for nj in j0..j1 {
                        nearest = nearest.min(snapshot[ni * w + nj]);
                    }
                }
                values[i * w + j] = nearest;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let outlier_count = (spec.outlier_rate * (h * w) as f64).round() as usize;
    if outlier_count > 0 && spec.outlier_magnitude > 0.0 {
        let mut order: Vec<usize> = (0..h * w).collect();
        order.shuffle(&mut rng);
        for &idx in &order[..outlier_count] {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            values[idx] += sign * spec.outlier_magnitude;
        }
    }
    for v in values.iter_mut() {
        if *v < MIN_PREDICTION {
            *v = MIN_PREDICTION;
        }
    }
    DenseField::from_parts(h, w, gt.representation(), values, vec![true; h * w])
}

// ---------------------------------------------------------------------------
// Sparse samplers

/// Seeded uniform sample of exactly `round(rate * valid)` valid pixels.
pub fn sample_uniform(gt: &DenseField, rate: f64, seed: u64) -> Result<SparseSignalMap> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config(format!("sampling rate must be in (0, 1], got {rate}")));
    }
    let pixels: Vec<(usize, usize, f64)> = gt.iter_valid().collect();
    let count = (rate * pixels.len() as f64).round() as usize;
    if count == 0 {
        return Err(Error::config(format!(
            "rate {rate} of {} valid pixels rounds to zero samples",
            pixels.len()
        )));
    }
    let chosen: Vec<&(usize, usize, f64)> = if count >= pixels.len() {
        pixels.iter().collect()
    } else {
        let mut order: Vec<usize> = (0..pixels.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        order[..count].iter().map(|&k| &pixels[k]).collect()
    };
    let points = chosen
        .into_iter()
        .map(|&(row, col, value)| SparsePoint { row, col, value })
        .collect();
    SparseSignalMap::new(gt.height(), gt.width(), gt.representation(), points)
}

/// Elevation angle of a 3-D point: positive above the optical axis.
fn elevation(x: f64, y: f64, z: f64) -> f64 {
    (-y).atan2((x * x + z * z).sqrt())
}

/// Slices the back-projected field into elevation bands and keeps
/// `beam_count` evenly spaced occupied bands (band phase chosen by seed).
///
/// Reproduces scanning-line sampling: selected pixels form thin near-row
/// stripes with large unguided gaps between them.
pub fn sample_beams(
    gt: &DenseField,
    intrinsics: &CameraIntrinsics,
    beam_count: usize,
    elevation_step_deg: f64,
    seed: u64,
) -> Result<SparseSignalMap> {
    if beam_count == 0 {
        return Err(Error::config("beam count must be >= 1"));
    }
    if !elevation_step_deg.is_finite() || elevation_step_deg <= 0.0 {
        return Err(Error::config(format!("elevation step must be > 0 degrees, got {elevation_step_deg}")));
    }
    if gt.representation() != Representation::DepthMeters {
        return Err(Error::Representation {
            expected: Representation::DepthMeters.name().to_string(),
            found: gt.representation().name().to_string(),
        });
    }
    let cloud = backproject(gt, intrinsics)?;
    if cloud.is_empty() {
        return Err(Error::config("no valid pixels to slice into beams"));
    }
    let step = elevation_step_deg.to_radians();
    let angles: Vec<f64> = cloud.points().iter().map(|p| elevation(p.x, p.y, p.z)).collect();
    let base = angles.iter().cloned().fold(f64::INFINITY, f64::min);
    let bands: Vec<usize> = angles.iter().map(|a| ((a - base) / step).floor() as usize).collect();
    let mut occupied: Vec<usize> = bands.clone();
    occupied.sort_unstable();
    occupied.dedup();

    let selected: std::collections::BTreeSet<usize> = if beam_count >= occupied.len() {
        occupied.iter().cloned().collect()
    } else {
        // Even spacing with a seeded phase, so different seeds shift which
        // stripes of the scene carry measurements.
        let stride = occupied.len() as f64 / beam_count as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase = rng.gen_range(0.0..stride);
        (0..beam_count)
            .map(|t| occupied[((phase + t as f64 * stride) as usize).min(occupied.len() - 1)])
            .collect()
    };
    let points: Vec<SparsePoint> = cloud
        .points()
        .iter()
        .zip(&bands)
        .filter(|&(_, band)| selected.contains(band))
        .map(|(p, _)| SparsePoint { row: p.row, col: p.col, value: gt.get(p.row, p.col).unwrap() })
        .collect();
    if points.is_empty() {
        return Err(Error::config("empty beams: no point fell into a selected band"));
    }
    SparseSignalMap::new(gt.height(), gt.width(), gt.representation(), points)
}

/// Seeded sample of exactly `count` valid pixels within a horizontal row band
/// `row_start..row_end`, the few-points-on-the-horizon regime.
pub fn sample_radar(
    gt: &DenseField,
    row_start: usize,
    row_end: usize,
    count: usize,
    seed: u64,
) -> Result<SparseSignalMap> {
    if count == 0 {
        return Err(Error::config("radar sample count must be >= 1"));
    }
    if row_start >= row_end || row_end > gt.height() {
        return Err(Error::config(format!(
            "row band {row_start}..{row_end} leaves the {} rows of the image",
            gt.height()
        )));
    }
    let pixels: Vec<(usize, usize, f64)> = gt
        .iter_valid()
        .filter(|&(i, _, _)| i >= row_start && i < row_end)
        .collect();
    if pixels.len() < count {
        return Err(Error::config(format!(
            "row band holds {} valid pixels, cannot sample {count}",
            pixels.len()
        )));
    }
    let mut order: Vec<usize> = (0..pixels.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let points = order[..count]
        .iter()
        .map(|&k| {
            let (row, col, value) = pixels[k];
            SparsePoint { row, col, value }
        })
        .collect();
    SparseSignalMap::new(gt.height(), gt.width(), gt.representation(), points)
}

// ---------------------------------------------------------------------------
// Synthetic cost volume

/// Peak evidence value of the synthetic volume.
///
/// The bump must tower over the noise floor by enough that a multiplicative
/// hint can re-rank disparities; a unit-height bump would make softargmax
/// readouts mushy and guidance ineffective.
const EVIDENCE_AMPLITUDE: f64 = 20.0;

/// Evidence volume for a disparity map: per pixel a clamped parabola peaked at
/// the true disparity (half-width √(2·20)/sharpness), plus seeded uniform
/// noise in [0, noise). Pixels without a disparity get the noise floor only.
pub fn build_cost_volume(
    disparity: &DenseField,
    d_max: usize,
    features: usize,
    sharpness: f64,
    noise: f64,
    seed: u64,
) -> Result<CostVolume> {
    if disparity.representation() != Representation::DisparityPixels {
        return Err(Error::Representation {
            expected: Representation::DisparityPixels.name().to_string(),
            found: disparity.representation().name().to_string(),
        });
    }
    if d_max == 0 || features == 0 {
        return Err(Error::config("cost volume needs d_max >= 1 and features >= 1"));
    }
    if !sharpness.is_finite() || sharpness <= 0.0 {
        return Err(Error::config(format!("sharpness must be finite and > 0, got {sharpness}")));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::config(format!("noise must be finite and >= 0, got {noise}")));
    }
    for (i, j, v) in disparity.iter_valid() {
        if v >= d_max as f64 {
            return Err(Error::config(format!(
                "disparity {v} at ({i}, {j}) is outside the volume range 0..{d_max}"
            )));
        }
    }
    let mut cv = CostVolume::zeros(disparity.height(), disparity.width(), d_max, features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..disparity.height() {
        for j in 0..disparity.width() {
            let center = disparity.get(i, j);
            for d in 0..d_max {
                for c in 0..features {
                    let evidence = match center {
                        Some(g) => {
                            let delta = d as f64 - g;
                            (EVIDENCE_AMPLITUDE - delta * delta * sharpness * sharpness / 2.0).max(0.0)
                        }
                        None => 0.0,
                    };
                    let n = if noise > 0.0 { noise * rng.gen::<f64>() } else { 0.0 };
                    cv.set(i, j, d, c, evidence + n);
                }
            }
        }
    }
    Ok(cv)
}
