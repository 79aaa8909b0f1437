//! Raster and sparse-signal containers shared by every stage.
//!
//! Invariants are enforced at construction: finite values, in-bounds
//! coordinates, confidence in [0, 1]. Invalid pixels are carried in an explicit
//! mask instead of a sentinel value so that 0.0 stays a legal measurement.

use crate::{Error, Result};

/// What the scalar at each pixel means. Confidence maps are `Unitless`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    DepthMeters,
    DisparityPixels,
    Unitless,
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Representation::DepthMeters => "depth-meters",
            Representation::DisparityPixels => "disparity-pixels",
            Representation::Unitless => "unitless",
        }
    }
}

impl std::fmt::Display for Representation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Dense scalar raster with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseField {
    width: usize,
    height: usize,
    repr: Representation,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DenseField {
    /// All-invalid field of the given shape.
    pub fn empty(height: usize, width: usize, repr: Representation) -> Self {
        DenseField {
            width,
            height,
            repr,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Fully valid field with one value everywhere.
    pub fn filled(height: usize, width: usize, repr: Representation, value: f64) -> Result<Self> {
        let mut f = DenseField::empty(height, width, repr);
        for i in 0..height {
            for j in 0..width {
                f.set(i, j, value)?;
            }
        }
        Ok(f)
    }

    /// Builds a field from parallel value/valid buffers, checking every invariant.
    pub fn from_parts(
        height: usize,
        width: usize,
        repr: Representation,
        values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::config(format!(
                "dense field buffers have length {}/{}, expected {}",
                values.len(),
                valid.len(),
                width * height
            )));
        }
        for (idx, (&v, &ok)) in values.iter().zip(&valid).enumerate() {
            if ok {
                check_field_value(repr, v).map_err(|e| {
                    Error::config(format!("pixel ({}, {}): {e}", idx / width, idx % width))
                })?;
            }
        }
        Ok(DenseField {
            width,
            height,
            repr,
            values,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn representation(&self) -> Representation {
        self.repr
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.height && j < self.width);
        i * self.width + j
    }

    #[inline]
    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[self.idx(i, j)]
    }

    /// Value at (i, j) if the pixel is valid.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let idx = self.idx(i, j);
        if self.valid[idx] {
            Some(self.values[idx])
        } else {
            None
        }
    }

    /// Raw stored value, 0.0 where invalid. Useful for channel stacking.
    #[inline]
    pub fn get_or_zero(&self, i: usize, j: usize) -> f64 {
        let idx = self.idx(i, j);
        if self.valid[idx] {
            self.values[idx]
        } else {
            0.0
        }
    }

    /// Sets a pixel and marks it valid. Rejects values the representation forbids.
    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        check_field_value(self.repr, value)
            .map_err(|e| Error::config(format!("pixel ({i}, {j}): {e}")))?;
        let idx = self.idx(i, j);
        self.values[idx] = value;
        self.valid[idx] = true;
        Ok(())
    }

    pub fn invalidate(&mut self, i: usize, j: usize) {
        let idx = self.idx(i, j);
        self.values[idx] = 0.0;
        self.valid[idx] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Iterates valid pixels as (i, j, value) in row-major order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let w = self.width;
        self.values
            .iter()
            .zip(&self.valid)
            .enumerate()
            .filter_map(move |(idx, (&v, &ok))| ok.then_some((idx / w, idx % w, v)))
    }

    pub fn same_shape(&self, other: &DenseField) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Reinterprets the raster under another representation, revalidating values.
    pub fn with_representation(&self, repr: Representation) -> Result<Self> {
        DenseField::from_parts(
            self.height,
            self.width,
            repr,
            self.values.clone(),
            self.valid.clone(),
        )
    }
}

fn check_field_value(repr: Representation, value: f64) -> std::result::Result<(), String> {
    if !value.is_finite() {
        return Err(format!("non-finite value {value}"));
    }
    if repr == Representation::Unitless && !(0.0..=1.0).contains(&value) {
        return Err(format!("unitless value {value} outside [0, 1]"));
    }
    Ok(())
}

/// Grayscale or RGB image with channel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl IntensityImage {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::config(format!(
                "intensity image must have 1 or 3 channels, got {channels}"
            )));
        }
        if values.len() != width * height * channels {
            return Err(Error::config(format!(
                "intensity buffer has length {}, expected {}",
                values.len(),
                width * height * channels
            )));
        }
        for &v in &values {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!(
                    "intensity value {v} outside [0, 1]"
                )));
            }
        }
        Ok(IntensityImage {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        IntensityImage::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn channel(&self, i: usize, j: usize, c: usize) -> f64 {
        debug_assert!(i < self.height && j < self.width && c < self.channels);
        self.values[(i * self.width + j) * self.channels + c]
    }

    pub fn set_channel(&mut self, i: usize, j: usize, c: usize, value: f64) -> Result<()> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(Error::config(format!("intensity value {value} outside [0, 1]")));
        }
        self.values[(i * self.width + j) * self.channels + c] = value;
        Ok(())
    }

    /// Largest per-channel absolute difference between two pixels.
    ///
    /// This is the distance both the flood fill and the kernel threshold on.
    #[inline]
    pub fn max_channel_diff(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let mut d = 0.0f64;
        for c in 0..self.channels {
            d = d.max((self.channel(a.0, a.1, c) - self.channel(b.0, b.1, c)).abs());
        }
        d
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }
}

/// One sparse measurement at integer pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsePoint {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Sparse measurements over a raster grid, in canonical (row, col) order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSignalMap {
    width: usize,
    height: usize,
    repr: Representation,
    points: Vec<SparsePoint>,
}

impl SparseSignalMap {
    pub fn new(
        height: usize,
        width: usize,
        repr: Representation,
        mut points: Vec<SparsePoint>,
    ) -> Result<Self> {
        if repr == Representation::Unitless {
            return Err(Error::config(
                "sparse signal maps carry depth or disparity, not unitless values",
            ));
        }
        for p in &points {
            if p.row >= height || p.col >= width {
                return Err(Error::config(format!(
                    "sparse point ({}, {}) outside {height}x{width} grid",
                    p.row, p.col
                )));
            }
            if !p.value.is_finite() || p.value <= 0.0 {
                return Err(Error::config(format!(
                    "sparse point ({}, {}) has non-positive value {}",
                    p.row, p.col, p.value
                )));
            }
        }
        points.sort_by_key(|p| (p.row, p.col));
        for pair in points.windows(2) {
            if pair[0].row == pair[1].row && pair[0].col == pair[1].col {
                return Err(Error::config(format!(
                    "duplicate sparse point at ({}, {})",
                    pair[0].row, pair[0].col
                )));
            }
        }
        Ok(SparseSignalMap {
            width,
            height,
            repr,
            points,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn representation(&self) -> Representation {
        self.repr
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points in canonical order; the position in this slice is the source index
    /// used for deterministic aggregation.
    pub fn points(&self) -> &[SparsePoint] {
        &self.points
    }

    pub fn value_at(&self, row: usize, col: usize) -> Option<f64> {
        self.points
            .binary_search_by_key(&(row, col), |p| (p.row, p.col))
            .ok()
            .map(|k| self.points[k].value)
    }

    /// Dense view: valid only at the sparse points.
    pub fn to_dense(&self) -> DenseField {
        let mut f = DenseField::empty(self.height, self.width, self.repr);
        for p in &self.points {
            f.set(p.row, p.col, p.value).expect("validated on construction");
        }
        f
    }
}

/// Clipped square footprint of one expanded source.
///
/// The conceptual footprint is the (2L+1)-sided square centered on the source,
/// intersected with the image; `values` covers exactly that intersection in
/// row-major order. The cell over the source pixel is exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidencePatch {
    pub source_index: usize,
    pub source_row: usize,
    pub source_col: usize,
    pub source_value: f64,
    pub half_size: usize,
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ConfidencePatch {
    pub fn new(
        source_index: usize,
        source: SparsePoint,
        half_size: usize,
        image_height: usize,
        image_width: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let (row0, col0, rows, cols) =
            patch_rect(source.row, source.col, half_size, image_height, image_width);
        if values.len() != rows * cols {
            return Err(Error::config(format!(
                "patch buffer has length {}, expected {} ({}x{})",
                values.len(),
                rows * cols,
                rows,
                cols
            )));
        }
        for &v in &values {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("patch confidence {v} outside [0, 1]")));
            }
        }
        let center = (source.row - row0) * cols + (source.col - col0);
        if values[center] != 1.0 {
            return Err(Error::config(format!(
                "patch center confidence must be exactly 1, got {}",
                values[center]
            )));
        }
        Ok(ConfidencePatch {
            source_index,
            source_row: source.row,
            source_col: source.col,
            source_value: source.value,
            half_size,
            row0,
            col0,
            rows,
            cols,
            values,
        })
    }

    /// Singleton patch covering only the source pixel, used for sources that are
    /// passed through without expansion.
    pub fn singleton(source_index: usize, source: SparsePoint) -> Self {
        ConfidencePatch {
            source_index,
            source_row: source.row,
            source_col: source.col,
            source_value: source.value,
            half_size: 0,
            row0: source.row,
            col0: source.col,
            rows: 1,
            cols: 1,
            values: vec![1.0],
        }
    }

    /// Clipped footprint as (row0, col0, rows, cols).
    pub fn rect(&self) -> (usize, usize, usize, usize) {
        (self.row0, self.col0, self.rows, self.cols)
    }

    #[inline]
    pub fn confidence_at(&self, i: usize, j: usize) -> Option<f64> {
        if i < self.row0 || j < self.col0 || i >= self.row0 + self.rows || j >= self.col0 + self.cols
        {
            return None;
        }
        Some(self.values[(i - self.row0) * self.cols + (j - self.col0)])
    }

    /// Iterates (i, j, confidence) over the clipped footprint.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let (row0, col0, cols) = (self.row0, self.col0, self.cols);
        self.values
            .iter()
            .enumerate()
            .map(move |(idx, &v)| (row0 + idx / cols, col0 + idx % cols, v))
    }
}

/// Intersection of the (2L+1) square centered at (row, col) with the image.
pub fn patch_rect(
    row: usize,
    col: usize,
    half_size: usize,
    image_height: usize,
    image_width: usize,
) -> (usize, usize, usize, usize) {
    let row0 = row.saturating_sub(half_size);
    let col0 = col.saturating_sub(half_size);
    let row1 = (row + half_size + 1).min(image_height);
    let col1 = (col + half_size + 1).min(image_width);
    (row0, col0, row1 - row0, col1 - col0)
}

/// Stereo cost volume laid out as (i, j, d, c), larger values meaning more
/// evidence for disparity d at pixel (i, j).
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    height: usize,
    width: usize,
    d_max: usize,
    features: usize,
    values: Vec<f64>,
}

impl CostVolume {
    pub fn new(
        height: usize,
        width: usize,
        d_max: usize,
        features: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if d_max == 0 || features == 0 {
            return Err(Error::config("cost volume needs d_max >= 1 and features >= 1"));
        }
        if values.len() != height * width * d_max * features {
            return Err(Error::config(format!(
                "cost volume buffer has length {}, expected {}",
                values.len(),
                height * width * d_max * features
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::config(format!("non-finite cost volume value {v}")));
        }
        Ok(CostVolume {
            height,
            width,
            d_max,
            features,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, d_max: usize, features: usize) -> Self {
        CostVolume {
            height,
            width,
            d_max,
            features,
            values: vec![0.0; height * width * d_max * features],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    pub fn features(&self) -> usize {
        self.features
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, d: usize, c: usize) -> usize {
        debug_assert!(i < self.height && j < self.width && d < self.d_max && c < self.features);
        ((i * self.width + j) * self.d_max + d) * self.features + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, d: usize, c: usize) -> f64 {
        self.values[self.idx(i, j, d, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, d: usize, c: usize, value: f64) {
        let idx = self.idx(i, j, d, c);
        self.values[idx] = value;
    }

    /// Multiplies every feature at (i, j, d) by `factor`.
    #[inline]
    pub fn scale(&mut self, i: usize, j: usize, d: usize, factor: f64) {
        let idx = self.idx(i, j, d, 0);
        for c in 0..self.features {
            self.values[idx + c] *= factor;
        }
    }

    /// Mean over feature channels at (i, j, d).
    #[inline]
    pub fn feature_mean(&self, i: usize, j: usize, d: usize) -> f64 {
        let idx = self.idx(i, j, d, 0);
        let mut s = 0.0;
        for c in 0..self.features {
            s += self.values[idx + c];
        }
        s / self.features as f64
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }
}

/// Multi-channel raster without a value-range invariant; output of channel
/// stacking, input to downstream network stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, channel-last: (i * width + j) * channels + c.
    pub values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unitless_field_rejects_out_of_range() {
        let mut f = DenseField::empty(2, 2, Representation::Unitless);
        assert!(f.set(0, 0, 1.0).is_ok());
        assert!(f.set(0, 1, 1.5).is_err());
        assert!(f.set(1, 0, -0.1).is_err());
        assert!(f.set(1, 1, f64::NAN).is_err());
    }

    #[test]
    fn depth_field_allows_any_finite_value() {
        let mut f = DenseField::empty(1, 2, Representation::DepthMeters);
        f.set(0, 0, 1234.5).unwrap();
        f.set(0, 1, -3.0).unwrap();
        assert_eq!(f.get(0, 0), Some(1234.5));
        assert!(f.set(0, 1, f64::INFINITY).is_err());
    }

    #[test]
    fn sparse_map_rejects_duplicates_and_bounds() {
        let p = |row, col, value| SparsePoint { row, col, value };
        let err = SparseSignalMap::new(
            4,
            4,
            Representation::DepthMeters,
            vec![p(1, 1, 2.0), p(1, 1, 3.0)],
        );
        assert!(err.is_err());
        let err = SparseSignalMap::new(4, 4, Representation::DepthMeters, vec![p(4, 0, 2.0)]);
        assert!(err.is_err());
        let err = SparseSignalMap::new(4, 4, Representation::DepthMeters, vec![p(0, 0, 0.0)]);
        assert!(err.is_err());
    }

    #[test]
    fn sparse_map_is_canonically_ordered() {
        let p = |row, col, value| SparsePoint { row, col, value };
        let m = SparseSignalMap::new(
            4,
            4,
            Representation::DepthMeters,
            vec![p(2, 1, 1.0), p(0, 3, 2.0), p(2, 0, 3.0)],
        )
        .unwrap();
        let order: Vec<_> = m.points().iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(order, vec![(0, 3), (2, 0), (2, 1)]);
        assert_eq!(m.value_at(2, 1), Some(1.0));
        assert_eq!(m.value_at(3, 3), None);
    }

    #[test]
    fn patch_rect_clips_at_borders() {
        assert_eq!(patch_rect(0, 0, 2, 10, 10), (0, 0, 3, 3));
        assert_eq!(patch_rect(5, 5, 2, 10, 10), (3, 3, 5, 5));
        assert_eq!(patch_rect(9, 9, 2, 10, 10), (7, 7, 3, 3));
    }

    #[test]
    fn patch_center_must_be_one() {
        let src = SparsePoint {
            row: 1,
            col: 1,
            value: 5.0,
        };
        let bad = ConfidencePatch::new(0, src, 1, 4, 4, vec![0.5; 9]);
        assert!(bad.is_err());
        let mut values = vec![0.5; 9];
        values[4] = 1.0;
        let ok = ConfidencePatch::new(0, src, 1, 4, 4, values).unwrap();
        assert_eq!(ok.confidence_at(1, 1), Some(1.0));
        assert_eq!(ok.confidence_at(3, 3), None);
    }

    #[test]
    fn cost_volume_layout_roundtrips() {
        let mut cv = CostVolume::zeros(2, 3, 4, 2);
        cv.set(1, 2, 3, 1, 7.5);
        assert_eq!(cv.get(1, 2, 3, 1), 7.5);
        assert_eq!(cv.get(1, 2, 3, 0), 0.0);
        cv.scale(1, 2, 3, 2.0);
        assert_eq!(cv.get(1, 2, 3, 1), 15.0);
        assert_eq!(cv.feature_mean(1, 2, 3), 7.5);
    }
}
