//! Pinhole camera model: disparity/depth conversion and 3-D back-projection.

use crate::field::{DenseField, Representation, SparsePoint, SparseSignalMap};
use crate::{Error, Result};

/// Pinhole intrinsics of a rectified stereo pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point column.
    pub cu: f64,
    /// Principal point row.
    pub cv: f64,
    /// Stereo baseline in meters.
    pub baseline: f64,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, cu: f64, cv: f64, baseline: f64) -> Result<Self> {
        if !(focal.is_finite() && focal > 0.0) {
            return Err(Error::config(format!("focal length must be positive, got {focal}")));
        }
        if !(baseline.is_finite() && baseline > 0.0) {
            return Err(Error::config(format!("baseline must be positive, got {baseline}")));
        }
        if !cu.is_finite() || !cv.is_finite() {
            return Err(Error::config("principal point must be finite"));
        }
        Ok(CameraIntrinsics { focal, cu, cv, baseline })
    }

    /// depth = focal * baseline / disparity.
    pub fn disparity_to_depth_value(&self, disparity: f64) -> Result<f64> {
        if disparity <= 0.0 {
            return Err(Error::numerical(format!(
                "cannot convert non-positive disparity {disparity} to depth"
            )));
        }
        Ok(self.focal * self.baseline / disparity)
    }

    pub fn depth_to_disparity_value(&self, depth: f64) -> Result<f64> {
        if depth <= 0.0 {
            return Err(Error::numerical(format!(
                "cannot convert non-positive depth {depth} to disparity"
            )));
        }
        Ok(self.focal * self.baseline / depth)
    }

    /// 3-D point of one pixel at the given depth.
    pub fn backproject_pixel(&self, row: usize, col: usize, z: f64) -> Result<[f64; 3]> {
        if !z.is_finite() || z <= 0.0 {
            return Err(Error::numerical(format!(
                "pixel ({row}, {col}): cannot back-project non-positive depth {z}"
            )));
        }
        Ok([
            (col as f64 - self.cu) * z / self.focal,
            (row as f64 - self.cv) * z / self.focal,
            z,
        ])
    }
}

/// Converts a disparity raster to depth, preserving the validity mask.
pub fn disparity_to_depth(field: &DenseField, intrinsics: &CameraIntrinsics) -> Result<DenseField> {
    convert(field, intrinsics, Representation::DisparityPixels, Representation::DepthMeters)
}

/// Converts a depth raster to disparity, preserving the validity mask.
pub fn depth_to_disparity(field: &DenseField, intrinsics: &CameraIntrinsics) -> Result<DenseField> {
    convert(field, intrinsics, Representation::DepthMeters, Representation::DisparityPixels)
}

fn convert(
    field: &DenseField,
    intrinsics: &CameraIntrinsics,
    from: Representation,
    to: Representation,
) -> Result<DenseField> {
    if field.representation() != from {
        return Err(Error::Representation {
            expected: from.name().to_string(),
            found: field.representation().name().to_string(),
        });
    }
    let mut out = DenseField::empty(field.height(), field.width(), to);
    for (i, j, v) in field.iter_valid() {
        if v <= 0.0 {
            return Err(Error::numerical(format!(
                "pixel ({i}, {j}): cannot invert non-positive value {v}"
            )));
        }
        // The same reciprocal formula both ways; only the representation flips.
        out.set(i, j, intrinsics.focal * intrinsics.baseline / v)?;
    }
    Ok(out)
}

/// A back-projected point with its originating pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub row: usize,
    pub col: usize,
}

/// 3-D points from a depth raster; `z > 0` for every point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud3D {
    points: Vec<CloudPoint>,
}

impl PointCloud3D {
    pub fn new(points: Vec<CloudPoint>) -> Result<Self> {
        for p in &points {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) || p.z <= 0.0 {
                return Err(Error::config(format!(
                    "cloud point at pixel ({}, {}) has invalid coordinates ({}, {}, {})",
                    p.row, p.col, p.x, p.y, p.z
                )));
            }
        }
        Ok(PointCloud3D { points })
    }

    pub fn points(&self) -> &[CloudPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Back-projects every valid depth pixel:
/// x = (j - cu) * z / f, y = (i - cv) * z / f, z = depth.
pub fn backproject(field: &DenseField, intrinsics: &CameraIntrinsics) -> Result<PointCloud3D> {
    if field.representation() != Representation::DepthMeters {
        return Err(Error::Representation {
            expected: Representation::DepthMeters.name().to_string(),
            found: field.representation().name().to_string(),
        });
    }
    let mut points = Vec::with_capacity(field.valid_count());
    for (i, j, z) in field.iter_valid() {
        if z <= 0.0 {
            return Err(Error::numerical(format!(
                "pixel ({i}, {j}): cannot back-project non-positive depth {z}"
            )));
        }
        points.push(CloudPoint {
            x: (j as f64 - intrinsics.cu) * z / intrinsics.focal,
            y: (i as f64 - intrinsics.cv) * z / intrinsics.focal,
            z,
            row: i,
            col: j,
        });
    }
    PointCloud3D::new(points)
}

/// Projects a cloud back onto the grid, rounding to the nearest pixel.
///
/// Points landing outside the grid are dropped; when several points round to
/// one pixel the nearest (smallest z) wins. On a cloud produced by
/// [`backproject`] this reproduces the source pixels exactly.
pub fn project(
    cloud: &PointCloud3D,
    intrinsics: &CameraIntrinsics,
    height: usize,
    width: usize,
) -> Result<SparseSignalMap> {
    let mut best: std::collections::BTreeMap<(usize, usize), f64> = std::collections::BTreeMap::new();
    for p in cloud.points() {
        let j = (p.x * intrinsics.focal / p.z + intrinsics.cu).round();
        let i = (p.y * intrinsics.focal / p.z + intrinsics.cv).round();
        if i < 0.0 || j < 0.0 || i as usize >= height || j as usize >= width {
            continue;
        }
        let slot = best.entry((i as usize, j as usize)).or_insert(p.z);
        if p.z < *slot {
            *slot = p.z;
        }
    }
    let points = best
        .into_iter()
        .map(|((row, col), value)| SparsePoint { row, col, value })
        .collect();
    SparseSignalMap::new(height, width, Representation::DepthMeters, points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 32.0, 24.0, 0.5).unwrap()
    }

    #[test]
    fn disparity_one_maps_to_focal_times_baseline() {
        // f = 100, b = 0.5, disparity 1 -> 50 m.
        assert_eq!(intr().disparity_to_depth_value(1.0).unwrap(), 50.0);
    }

    #[test]
    fn conversion_is_an_involution() {
        let intr = intr();
        for &d in &[0.25, 1.0, 3.7, 19.0, 120.0] {
            let z = intr.disparity_to_depth_value(d).unwrap();
            let back = intr.depth_to_disparity_value(z).unwrap();
            assert!((back - d).abs() <= 1e-9 * d, "{d} -> {z} -> {back}");
        }
    }

    #[test]
    fn conversion_rejects_non_positive() {
        let mut f = DenseField::empty(1, 1, Representation::DisparityPixels);
        f.set(0, 0, -2.0).unwrap();
        assert!(matches!(
            disparity_to_depth(&f, &intr()),
            Err(Error::Numerical(_))
        ));
        assert!(intr().disparity_to_depth_value(0.0).is_err());
    }

    #[test]
    fn field_conversion_preserves_mask() {
        let mut f = DenseField::empty(2, 2, Representation::DisparityPixels);
        f.set(0, 1, 2.0).unwrap();
        let z = disparity_to_depth(&f, &intr()).unwrap();
        assert_eq!(z.get(0, 1), Some(25.0));
        assert_eq!(z.get(0, 0), None);
        assert_eq!(z.representation(), Representation::DepthMeters);
    }

    #[test]
    fn backproject_puts_principal_point_on_axis() {
        // Pixel (cv, cu + f) at depth 2 lands at (2, 0, 2).
        let intr = CameraIntrinsics::new(10.0, 3.0, 4.0, 0.5).unwrap();
        let mut f = DenseField::empty(8, 16, Representation::DepthMeters);
        f.set(4, 13, 2.0).unwrap();
        let cloud = backproject(&f, &intr).unwrap();
        assert_eq!(cloud.len(), 1);
        let p = cloud.points()[0];
        assert_eq!((p.x, p.y, p.z), (2.0, 0.0, 2.0));
    }

    #[test]
    fn project_after_backproject_is_identity_on_pixels() {
        let intr = intr();
        let mut f = DenseField::empty(48, 64, Representation::DepthMeters);
        for i in (0..48).step_by(5) {
            for j in (0..64).step_by(7) {
                f.set(i, j, 2.0 + 0.37 * i as f64 + 0.11 * j as f64).unwrap();
            }
        }
        let cloud = backproject(&f, &intr).unwrap();
        let reprojected = project(&cloud, &intr, 48, 64).unwrap();
        assert_eq!(reprojected.len(), cloud.len());
        for p in reprojected.points() {
            assert_eq!(f.get(p.row, p.col), Some(p.value));
        }
    }

    #[test]
    fn project_keeps_nearest_on_collision() {
        let intr = intr();
        let points = vec![
            CloudPoint { x: 0.0, y: 0.0, z: 5.0, row: 0, col: 0 },
            CloudPoint { x: 0.0, y: 0.0, z: 3.0, row: 0, col: 0 },
        ];
        let cloud = PointCloud3D::new(points).unwrap();
        let m = project(&cloud, &intr, 48, 64, ).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.points()[0].value, 3.0);
    }
}
