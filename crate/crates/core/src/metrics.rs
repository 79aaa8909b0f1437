//! Error metrics over the valid overlap of a prediction and its ground truth.
//!
//! Disparity-style metrics (mean absolute error, outlier rates) apply to both
//! representations; ratio-based depth metrics (RMS, REL, inlier deltas) are
//! only meaningful for positive metric depths and stay unset otherwise.

use crate::field::{DenseField, Representation};
use crate::{Error, Result};

/// Thresholds for the `>n` outlier rates, in signal units.
pub const OUTLIER_THRESHOLDS: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
/// Default error-reduction margins for [`improvement`].
pub const IMPROVEMENT_THRESHOLDS: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

/// Accuracy summary of one prediction against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub representation: Representation,
    /// Valid pixels shared by prediction and ground truth.
    pub pixel_count: usize,
    /// Mean absolute error.
    pub avg: f64,
    /// Percent of pixels with |error| strictly above 1, 2, 3, 4, 5 units.
    pub outlier_pct: [f64; 5],
    /// Root mean square error; depth only.
    pub rms: Option<f64>,
    /// Mean absolute relative error; depth only.
    pub rel: Option<f64>,
    /// Percent of pixels with max(pred/gt, gt/pred) strictly below
    /// 1.25, 1.25^2, 1.25^3; depth only.
    pub delta_pct: Option<[f64; 3]>,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "representation,pixels,avg,gt1,gt2,gt3,gt4,gt5,rms,rel,delta1,delta2,delta3"
    }

    /// One CSV row; depth-only columns are left empty for disparity reports.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let deltas = match self.delta_pct {
            Some(d) => [d[0].to_string(), d[1].to_string(), d[2].to_string()],
            None => [String::new(), String::new(), String::new()],
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.representation.name(),
            self.pixel_count,
            self.avg,
            self.outlier_pct[0],
            self.outlier_pct[1],
            self.outlier_pct[2],
            self.outlier_pct[3],
            self.outlier_pct[4],
            opt(self.rms),
            opt(self.rel),
            deltas[0],
            deltas[1],
            deltas[2],
        )
    }
}

/// Compares a prediction to ground truth over their common valid support.
pub fn evaluate(prediction: &DenseField, gt: &DenseField) -> Result<EvalReport> {
    if !prediction.same_shape(gt) {
        return Err(Error::config(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            prediction.height(),
            prediction.width(),
            gt.height(),
            gt.width()
        )));
    }
    if prediction.representation() != gt.representation() {
        return Err(Error::Representation {
            expected: gt.representation().name().to_string(),
            found: prediction.representation().name().to_string(),
        });
    }
    let repr = gt.representation();
    if repr == Representation::Unitless {
        return Err(Error::config("evaluation expects depth or disparity fields"));
    }
    let mut count = 0usize;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut rel_sum = 0.0;
    let mut outliers = [0usize; 5];
    let mut inliers = [0usize; 3];
    for (i, j, p) in prediction.iter_valid() {
        let Some(g) = gt.get(i, j) else { continue };
        let err = (p - g).abs();
        count += 1;
        abs_sum += err;
        for (slot, t) in outliers.iter_mut().zip(OUTLIER_THRESHOLDS) {
            if err > t {
                *slot += 1;
            }
        }
        if repr == Representation::DepthMeters {
            if g <= 0.0 {
                return Err(Error::config(format!(
                    "ground-truth depth {g} at ({i}, {j}) is not positive; ratio metrics undefined"
                )));
            }
            sq_sum += err * err;
            rel_sum += err / g;
            // A non-positive prediction can never be an inlier.
            let ratio = if p > 0.0 { (p / g).max(g / p) } else { f64::INFINITY };
            for (k, slot) in inliers.iter_mut().enumerate() {
                if ratio < 1.25_f64.powi(k as i32 + 1) {
                    *slot += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::config("prediction and ground truth share no valid pixels"));
    }
    let pct = |n: usize| 100.0 * n as f64 / count as f64;
    let depth = repr == Representation::DepthMeters;
    Ok(EvalReport {
        representation: repr,
        pixel_count: count,
        avg: abs_sum / count as f64,
        outlier_pct: [
            pct(outliers[0]),
            pct(outliers[1]),
            pct(outliers[2]),
            pct(outliers[3]),
            pct(outliers[4]),
        ],
        rms: depth.then(|| (sq_sum / count as f64).sqrt()),
        rel: depth.then(|| rel_sum / count as f64),
        delta_pct: depth.then(|| [pct(inliers[0]), pct(inliers[1]), pct(inliers[2])]),
    })
}

/// Per-threshold fraction of pixels a guided result improved on.
#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementReport {
    pub thresholds: Vec<f64>,
    /// Percent of pixels where |baseline error| - |guided error| exceeds the
    /// matching threshold.
    pub improved_pct: Vec<f64>,
    pub pixel_count: usize,
}

impl ImprovementReport {
    pub fn csv_header(&self) -> String {
        let cols: Vec<String> = self.thresholds.iter().map(|t| format!("improved_gt{t}")).collect();
        format!("pixels,{}", cols.join(","))
    }

    pub fn csv_row(&self) -> String {
        let cols: Vec<String> = self.improved_pct.iter().map(|p| p.to_string()).collect();
        format!("{},{}", self.pixel_count, cols.join(","))
    }
}

/// Measures how often guidance reduced the per-pixel error by more than each
/// threshold, over pixels valid in all three fields.
pub fn improvement(
    baseline: &DenseField,
    guided: &DenseField,
    gt: &DenseField,
    thresholds: &[f64],
) -> Result<ImprovementReport> {
    if !baseline.same_shape(gt) || !guided.same_shape(gt) {
        return Err(Error::config("improvement needs three equal-shaped fields"));
    }
    for field in [baseline, guided] {
        if field.representation() != gt.representation() {
            return Err(Error::Representation {
                expected: gt.representation().name().to_string(),
                found: field.representation().name().to_string(),
            });
        }
    }
    if thresholds.is_empty() {
        return Err(Error::config("improvement needs at least one threshold"));
    }
    for &t in thresholds {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::config(format!("improvement threshold {t} must be finite and >= 0")));
        }
    }
    let mut count = 0usize;
    let mut wins = vec![0usize; thresholds.len()];
    for (i, j, b) in baseline.iter_valid() {
        let (Some(g), Some(truth)) = (guided.get(i, j), gt.get(i, j)) else { continue };
        count += 1;
        let reduction = (b - truth).abs() - (g - truth).abs();
        for (slot, &t) in wins.iter_mut().zip(thresholds) {
            if reduction > t {
                *slot += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::config("improvement fields share no valid pixels"));
    }
    Ok(ImprovementReport {
        thresholds: thresholds.to_vec(),
        improved_pct: wins.iter().map(|&n| 100.0 * n as f64 / count as f64).collect(),
        pixel_count: count,
    })
}

/// Fixed-width comparison table of labeled reports, one row each.
pub fn text_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut out = String::from(
        "method          pixels      avg      >1      >2      >3      >4      >5      rms      rel     d1     d2     d3\n",
    );
    for (label, r) in rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:8.4}")).unwrap_or_else(|| format!("{:>8}", "-"));
        let deltas = match r.delta_pct {
            Some(d) => d.map(|x| format!("{x:6.2}")),
            None => [0, 1, 2].map(|_| format!("{:>6}", "-")),
        };
        out.push_str(&format!(
            "{label:<14} {:>7} {:8.4} {:7.2} {:7.2} {:7.2} {:7.2} {:7.2} {} {} {} {} {}\n",
            r.pixel_count,
            r.avg,
            r.outlier_pct[0],
            r.outlier_pct[1],
            r.outlier_pct[2],
            r.outlier_pct[3],
            r.outlier_pct[4],
            opt(r.rms),
            opt(r.rel),
            deltas[0],
            deltas[1],
            deltas[2],
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(repr: Representation, values: &[f64]) -> DenseField {
        let mut f = DenseField::empty(1, values.len(), repr);
        for (j, &v) in values.iter().enumerate() {
            f.set(0, j, v).unwrap();
        }
        f
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let gt = field(Representation::DepthMeters, &[2.0, 5.0, 9.0]);
        let r = evaluate(&gt, &gt).unwrap();
        assert_eq!(r.avg, 0.0);
        assert_eq!(r.outlier_pct, [0.0; 5]);
        assert_eq!(r.rms, Some(0.0));
        assert_eq!(r.rel, Some(0.0));
        assert_eq!(r.delta_pct, Some([100.0, 100.0, 100.0]));
        assert_eq!(r.pixel_count, 3);
    }

    #[test]
    fn constant_offset_matches_hand_numbers() {
        let gt = field(Representation::DepthMeters, &[10.0, 10.0, 10.0, 10.0]);
        let pred = field(Representation::DepthMeters, &[13.0, 13.0, 13.0, 13.0]);
        let r = evaluate(&pred, &gt).unwrap();
        assert_eq!(r.avg, 3.0);
        // Strict thresholds: an error of exactly 3 is not "> 3".
        assert_eq!(r.outlier_pct, [100.0, 100.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.rms, Some(3.0));
        assert!((r.rel.unwrap() - 0.3).abs() < 1e-15);
        // Ratio 1.3: outside 1.25, inside 1.5625 and 1.953125.
        assert_eq!(r.delta_pct, Some([0.0, 100.0, 100.0]));
    }

    #[test]
    fn delta_boundary_ratio_is_excluded() {
        let gt = field(Representation::DepthMeters, &[10.0, 10.0]);
        let pred = field(Representation::DepthMeters, &[12.5, 10.0]);
        let r = evaluate(&pred, &gt).unwrap();
        // 12.5 / 10 = 1.25 exactly, which is not < 1.25.
        assert_eq!(r.delta_pct, Some([50.0, 100.0, 100.0]));
    }

    #[test]
    fn disparity_reports_skip_depth_metrics() {
        let gt = field(Representation::DisparityPixels, &[4.0, 6.0]);
        let pred = field(Representation::DisparityPixels, &[5.5, 6.0]);
        let r = evaluate(&pred, &gt).unwrap();
        assert_eq!(r.avg, 0.75);
        assert_eq!(r.outlier_pct[0], 50.0);
        assert_eq!(r.rms, None);
        assert_eq!(r.rel, None);
        assert_eq!(r.delta_pct, None);
        // Zero ground-truth disparity is fine when no ratio metric runs.
        let gt0 = field(Representation::DisparityPixels, &[0.5, 6.0]);
        assert!(evaluate(&pred, &gt0).is_ok());
    }

    #[test]
    fn overlap_only_and_empty_overlap_errors() {
        let gt = field(Representation::DepthMeters, &[10.0, 20.0]);
        let mut pred = field(Representation::DepthMeters, &[11.0, 99.0]);
        pred.invalidate(0, 1);
        let r = evaluate(&pred, &gt).unwrap();
        assert_eq!(r.pixel_count, 1);
        assert_eq!(r.avg, 1.0);
        pred.invalidate(0, 0);
        assert!(matches!(evaluate(&pred, &gt), Err(Error::Config(_))));
    }

    #[test]
    fn nonpositive_gt_depth_is_rejected() {
        let gt = field(Representation::DepthMeters, &[10.0, -1.0]);
        let pred = field(Representation::DepthMeters, &[10.0, 5.0]);
        assert!(evaluate(&pred, &gt).is_err());
    }

    #[test]
    fn representation_mismatch_is_rejected() {
        let gt = field(Representation::DepthMeters, &[10.0]);
        let pred = field(Representation::DisparityPixels, &[10.0]);
        assert!(matches!(evaluate(&pred, &gt), Err(Error::Representation { .. })));
    }

    #[test]
    fn improvement_counts_strict_reductions() {
        let gt = field(Representation::DepthMeters, &[10.0, 10.0, 10.0, 10.0]);
        let base = field(Representation::DepthMeters, &[13.0, 13.0, 13.0, 13.0]);
        // Two pixels fixed entirely, two untouched.
        let guided = field(Representation::DepthMeters, &[10.0, 10.0, 13.0, 13.0]);
        let r = improvement(&base, &guided, &gt, &IMPROVEMENT_THRESHOLDS).unwrap();
        assert_eq!(r.improved_pct, vec![50.0, 50.0, 50.0, 50.0]);
        // Reduction of exactly 3 fails a threshold of 3.
        let r3 = improvement(&base, &guided, &gt, &[3.0]).unwrap();
        assert_eq!(r3.improved_pct, vec![0.0]);
        // Identical fields never improve at any threshold.
        let same = improvement(&base, &base, &gt, &IMPROVEMENT_THRESHOLDS).unwrap();
        assert_eq!(same.improved_pct, vec![0.0; 4]);
    }

    #[test]
    fn improvement_is_monotone_in_threshold() {
        let gt = field(Representation::DepthMeters, &[10.0; 6]);
        let base = field(Representation::DepthMeters, &[15.0, 14.0, 13.0, 12.0, 11.0, 10.5]);
        let guided = field(Representation::DepthMeters, &[10.0; 6]);
        let r = improvement(&base, &guided, &gt, &[0.0, 0.5, 1.0, 2.0, 4.0]).unwrap();
        for pair in r.improved_pct.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
        assert_eq!(r.improved_pct[0], 100.0);
    }

    #[test]
    fn csv_rows_align_with_header() {
        let gt = field(Representation::DepthMeters, &[10.0, 10.0]);
        let pred = field(Representation::DepthMeters, &[11.0, 12.0]);
        let r = evaluate(&pred, &gt).unwrap();
        let header_cols = EvalReport::csv_header().split(',').count();
        assert_eq!(r.csv_row().split(',').count(), header_cols);
        let disp_gt = field(Representation::DisparityPixels, &[4.0]);
        let disp = evaluate(&disp_gt, &disp_gt).unwrap();
        assert_eq!(disp.csv_row().split(',').count(), header_cols);
        assert!(disp.csv_row().ends_with(",,,,"));
    }

    #[test]
    fn text_table_lists_each_method_once() {
        let gt = field(Representation::DepthMeters, &[10.0, 10.0]);
        let pred = field(Representation::DepthMeters, &[11.0, 12.0]);
        let r = evaluate(&pred, &gt).unwrap();
        let table = text_table(&[("raw", &r), ("guided", &r)]);
        assert_eq!(table.lines().count(), 3);
        assert!(table.contains("raw"));
        assert!(table.contains("guided"));
    }
}
