//! Injection of expanded guidance into a depth pipeline.
//!
//! Four injection points are covered: blending at the output, multiplicative
//! peaking of a stereo cost volume (with the classic hint-only variant as a
//! special case), interpolation of normalization parameters, and plain channel
//! concatenation at the input. A softargmax readout turns modulated volumes
//! back into disparity maps so the effect of modulation is measurable.

use crate::field::{
    ChannelStack, CostVolume, DenseField, IntensityImage, Representation, SparseSignalMap,
};
use crate::{Error, Result};

/// Shape of the multiplicative Gaussian applied around a hinted disparity:
/// `height` at the hint, falling off with `width`, on top of an additive
/// `shift` that keeps every multiplier positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianGuideConfig {
    pub height: f64,
    pub width: f64,
    pub shift: f64,
}

impl Default for GaussianGuideConfig {
    fn default() -> Self {
        GaussianGuideConfig { height: 10.0, width: 1.0, shift: 1.0 }
    }
}

impl GaussianGuideConfig {
    pub fn new(height: f64, width: f64, shift: f64) -> Result<Self> {
        if !height.is_finite() || height <= 0.0 {
            return Err(Error::config(format!("gaussian height must be finite and > 0, got {height}")));
        }
        if !width.is_finite() || width <= 0.0 {
            return Err(Error::config(format!("gaussian width must be finite and > 0, got {width}")));
        }
        if !shift.is_finite() || shift < 0.0 {
            return Err(Error::config(format!("gaussian shift must be finite and >= 0, got {shift}")));
        }
        Ok(GaussianGuideConfig { height, width, shift })
    }

    #[inline]
    fn bump(&self, d: f64, hinted: f64) -> f64 {
        let delta = d - hinted;
        self.height * (-(delta * delta) / (2.0 * self.width * self.width)).exp()
    }
}

// ---------------------------------------------------------------------------
// Output stage

/// Blends suggestion and prediction per pixel by confidence.
///
/// Where the suggestion is valid the output is `g*c + d*(1-c)`; elsewhere the
/// prediction passes through untouched (including its invalid pixels).
pub fn fuse_output(
    expanded: &DenseField,
    confidence: &DenseField,
    prediction: &DenseField,
) -> Result<DenseField> {
    if !expanded.same_shape(confidence) || !expanded.same_shape(prediction) {
        return Err(Error::config("fuse inputs must share one shape"));
    }
    if expanded.representation() != prediction.representation() {
        return Err(Error::Representation {
            expected: prediction.representation().name().to_string(),
            found: expanded.representation().name().to_string(),
        });
    }
    if confidence.representation() != Representation::Unitless {
        return Err(Error::Representation {
            expected: Representation::Unitless.name().to_string(),
            found: confidence.representation().name().to_string(),
        });
    }
    let mut out = DenseField::empty(prediction.height(), prediction.width(), prediction.representation());
    for i in 0..prediction.height() {
        for j in 0..prediction.width() {
            match expanded.get(i, j) {
                Some(g) => {
                    let c = confidence.get(i, j).ok_or_else(|| {
                        Error::config(format!("no confidence at ({i}, {j}) despite a valid suggestion"))
                    })?;
                    let d = prediction.get(i, j).ok_or_else(|| {
                        Error::config(format!("prediction is invalid at guided pixel ({i}, {j})"))
                    })?;
                    out.set(i, j, g * c + d * (1.0 - c))?;
                }
                None => {
                    if let Some(d) = prediction.get(i, j) {
                        out.set(i, j, d)?;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Baseline guidance: overwrite the prediction at the measured pixels only.
pub fn naive_output_guidance(sparse: &SparseSignalMap, prediction: &DenseField) -> Result<DenseField> {
    if sparse.height() != prediction.height() || sparse.width() != prediction.width() {
        return Err(Error::config("sparse map and prediction shapes differ"));
    }
    if sparse.representation() != prediction.representation() {
        return Err(Error::Representation {
            expected: prediction.representation().name().to_string(),
            found: sparse.representation().name().to_string(),
        });
    }
    let mut out = prediction.clone();
    for p in sparse.points() {
        out.set(p.row, p.col, p.value)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cost-volume stage

fn check_disparity_volume(volume: &CostVolume, height: usize, width: usize, repr: Representation) -> Result<()> {
    if repr != Representation::DisparityPixels {
        return Err(Error::Representation {
            expected: Representation::DisparityPixels.name().to_string(),
            found: repr.name().to_string(),
        });
    }
    if volume.height() != height || volume.width() != width {
        return Err(Error::config(format!(
            "cost volume is {}x{} but guidance is {height}x{width}",
            volume.height(),
            volume.width()
        )));
    }
    Ok(())
}

fn check_hint_range(value: f64, row: usize, col: usize, d_max: usize) -> Result<()> {
    if value >= d_max as f64 {
        return Err(Error::config(format!(
            "hinted disparity {value} at ({row}, {col}) is outside the volume range 0..{d_max}"
        )));
    }
    Ok(())
}

/// Peaks the volume around each raw hint with a multiplicative Gaussian.
///
/// At a hint pixel every feature at disparity d is multiplied by
/// `height * exp(-(d - hint)^2 / (2 width^2))`; other pixels are untouched.
/// One hint per pixel is guaranteed by the sparse-map invariant.
pub fn gsm_modulate(
    volume: &CostVolume,
    hints: &SparseSignalMap,
    cfg: &GaussianGuideConfig,
) -> Result<CostVolume> {
    check_disparity_volume(volume, hints.height(), hints.width(), hints.representation())?;
    let mut out = volume.clone();
    for p in hints.points() {
        check_hint_range(p.value, p.row, p.col, volume.d_max())?;
        for d in 0..volume.d_max() {
            out.scale(p.row, p.col, d, cfg.bump(d as f64, p.value));
        }
    }
    Ok(out)
}

/// Confidence-weighted volume modulation over the expanded support.
///
/// Where the suggestion is valid the multiplier is `c * bump + shift`, so full
/// confidence recovers the raw-hint Gaussian and zero confidence degrades to a
/// uniform `shift`. Pixels without a suggestion are bit-identical to the input.
pub fn confidence_modulate(
    volume: &CostVolume,
    expanded: &DenseField,
    confidence: &DenseField,
    cfg: &GaussianGuideConfig,
) -> Result<CostVolume> {
    check_disparity_volume(volume, expanded.height(), expanded.width(), expanded.representation())?;
    if !expanded.same_shape(confidence) {
        return Err(Error::config("suggestion and confidence shapes differ"));
    }
    if confidence.representation() != Representation::Unitless {
        return Err(Error::Representation {
            expected: Representation::Unitless.name().to_string(),
            found: confidence.representation().name().to_string(),
        });
    }
    let mut out = volume.clone();
    for (i, j, g) in expanded.iter_valid() {
        check_hint_range(g, i, j, volume.d_max())?;
        let c = confidence.get(i, j).ok_or_else(|| {
            Error::config(format!("no confidence at ({i}, {j}) despite a valid suggestion"))
        })?;
        for d in 0..volume.d_max() {
            out.scale(i, j, d, c * cfg.bump(d as f64, g) + cfg.shift);
        }
    }
    Ok(out)
}

/// Softargmax readout of the volume's channel-mean evidence.
///
/// Per pixel: `sum_d d * softmax_d(mean_c CV(i, j, d, c))`, with the usual
/// max subtraction for stability. Always fully valid.
pub fn regress_disparity(volume: &CostVolume) -> DenseField {
    let mut out = DenseField::empty(volume.height(), volume.width(), Representation::DisparityPixels);
    let mut scores = vec![0.0f64; volume.d_max()];
    for i in 0..volume.height() {
        for j in 0..volume.width() {
            for (d, s) in scores.iter_mut().enumerate() {
                *s = volume.feature_mean(i, j, d);
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            let mut weighted = 0.0;
            for (d, &s) in scores.iter().enumerate() {
                let e = (s - m).exp();
                total += e;
                weighted += d as f64 * e;
            }
            out.set(i, j, weighted / total).expect("softargmax stays in range");
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Normalization stage

/// Per-channel, per-disparity normalization parameters plus the hint-value
/// conditioning that replaces them where guidance is available.
///
/// The unconditional tables are indexed `[channel * d_max + d]`. The
/// conditional gain/offset are affine in the suggested value and get modulated
/// per disparity before blending.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    channels: usize,
    d_max: usize,
    unconditional_gain: Vec<f64>,
    unconditional_offset: Vec<f64>,
    /// Conditional gain of a hint v is `gain_scale * v + gain_shift`.
    pub gain_scale: f64,
    pub gain_shift: f64,
    pub offset_scale: f64,
    pub offset_shift: f64,
    /// Per-disparity modulation: conditional gain becomes
    /// `gain_mod_mul[d] * gain(v) + gain_mod_add[d]`, analogously for offsets.
    gain_mod_mul: Vec<f64>,
    gain_mod_add: Vec<f64>,
    offset_mod_mul: Vec<f64>,
    offset_mod_add: Vec<f64>,
}

impl NormParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        d_max: usize,
        unconditional_gain: Vec<f64>,
        unconditional_offset: Vec<f64>,
        gain_scale: f64,
        gain_shift: f64,
        offset_scale: f64,
        offset_shift: f64,
        gain_mod_mul: Vec<f64>,
        gain_mod_add: Vec<f64>,
        offset_mod_mul: Vec<f64>,
        offset_mod_add: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || d_max == 0 {
            return Err(Error::config("norm parameters need channels >= 1 and d_max >= 1"));
        }
        let tables: [(&str, &[f64], usize); 6] = [
            ("unconditional gain", &unconditional_gain, channels * d_max),
            ("unconditional offset", &unconditional_offset, channels * d_max),
            ("gain modulator scale", &gain_mod_mul, d_max),
            ("gain modulator shift", &gain_mod_add, d_max),
            ("offset modulator scale", &offset_mod_mul, d_max),
            ("offset modulator shift", &offset_mod_add, d_max),
        ];
        for (name, table, want) in tables {
            if table.len() != want {
                return Err(Error::config(format!("{name} table has length {}, expected {want}", table.len())));
            }
            if let Some(v) = table.iter().find(|v| !v.is_finite()) {
                return Err(Error::config(format!("{name} table holds non-finite value {v}")));
            }
        }
        for v in [gain_scale, gain_shift, offset_scale, offset_shift] {
            if !v.is_finite() {
                return Err(Error::config(format!("conditional coefficient {v} is not finite")));
            }
        }
        Ok(NormParams {
            channels,
            d_max,
            unconditional_gain,
            unconditional_offset,
            gain_scale,
            gain_shift,
            offset_scale,
            offset_shift,
            gain_mod_mul,
            gain_mod_add,
            offset_mod_mul,
            offset_mod_add,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }
}

/// Normalization parameters for one (pixel, disparity): per-channel (gain,
/// offset) pairs, blending the hint-conditioned branch with the unconditional
/// tables by confidence. Without a valid suggestion the tables pass through.
pub fn norm_modulate(
    params: &NormParams,
    expanded: &DenseField,
    confidence: &DenseField,
    pixel: (usize, usize),
    d: usize,
) -> Result<Vec<(f64, f64)>> {
    if d >= params.d_max {
        return Err(Error::config(format!("disparity {d} outside 0..{}", params.d_max)));
    }
    if !expanded.same_shape(confidence) {
        return Err(Error::config("suggestion and confidence shapes differ"));
    }
    let (i, j) = pixel;
    if i >= expanded.height() || j >= expanded.width() {
        return Err(Error::config(format!(
            "pixel ({i}, {j}) outside {}x{} guidance",
            expanded.height(),
            expanded.width()
        )));
    }
    let conditioned = expanded.get(i, j).map(|g| {
        let c = confidence.get(i, j).unwrap_or(0.0);
        let gain = params.gain_mod_mul[d] * (params.gain_scale * g + params.gain_shift) + params.gain_mod_add[d];
        let offset =
            params.offset_mod_mul[d] * (params.offset_scale * g + params.offset_shift) + params.offset_mod_add[d];
        (c, gain, offset)
    });
    Ok((0..params.channels)
        .map(|ch| {
            let table = ch * params.d_max + d;
            let (bare_gain, bare_offset) =
                (params.unconditional_gain[table], params.unconditional_offset[table]);
            match conditioned {
                Some((c, gain, offset)) => {
                    (c * gain + (1.0 - c) * bare_gain, c * offset + (1.0 - c) * bare_offset)
                }
                None => (bare_gain, bare_offset),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Input stage

/// Stacks `[image channels | suggestion | confidence]` into one raster.
///
/// Invalid pixels contribute 0 in the two guidance channels.
pub fn input_concat(
    image: &IntensityImage,
    expanded: &DenseField,
    confidence: &DenseField,
) -> Result<ChannelStack> {
    if image.height() != expanded.height()
        || image.width() != expanded.width()
        || !expanded.same_shape(confidence)
    {
        return Err(Error::config("input stack shapes differ"));
    }
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let channels = ch + 2;
    let mut values = Vec::with_capacity(h * w * channels);
    for i in 0..h {
        for j in 0..w {
            for c in 0..ch {
                values.push(image.channel(i, j, c));
            }
            values.push(expanded.get_or_zero(i, j));
            values.push(confidence.get_or_zero(i, j));
        }
    }
    Ok(ChannelStack { height: h, width: w, channels, values })
}
