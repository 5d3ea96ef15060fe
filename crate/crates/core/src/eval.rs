//! Ground-truth pixel projection, match success ratios and pose statistics.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{metric_to_aerial_px, AerialMeta, CameraIntrinsics, Pose3DoF};
use crate::par;
use crate::pose::{csv_error, PoseError};
use crate::tensor::Tensor;

/// Default range limit of the valid region, meters.
pub const DEFAULT_MAX_RANGE_M: f64 = 30.0;

/// Default pixel thresholds for match success.
pub const DEFAULT_THRESHOLDS_PX: [f64; 3] = [5.0, 10.0, 15.0];

/// How the range limit is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    /// Distance along the viewing ray (the depth value itself).
    #[default]
    Ray3d,
    /// Horizontal distance from the camera.
    Planar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub max_range_m: f64,
    pub range_mode: RangeMode,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            max_range_m: DEFAULT_MAX_RANGE_M,
            range_mode: RangeMode::Ray3d,
        }
    }
}

/// Per panorama pixel, the aerial pixel it projects to.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthProjection {
    /// `[H, W, 2]`; zero where invalid.
    pub aerial_px: Array3<f64>,
    /// `[H, W]`
    pub valid_mask: Array2<bool>,
}

impl GroundTruthProjection {
    pub fn pano_h(&self) -> usize {
        self.valid_mask.nrows()
    }

    pub fn pano_w(&self) -> usize {
        self.valid_mask.ncols()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// Aerial pixel for the panorama pixel nearest `(x, y)`. Columns wrap
    /// around the panorama seam; rows outside the image are invalid.
    pub fn lookup(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        let (h, w) = (self.pano_h() as f64, self.pano_w() as f64);
        let v = y.round();
        if !(0.0..h).contains(&v) {
            return None;
        }
        let u = x.round().rem_euclid(w);
        let (v, u) = (v as usize, u as usize);
        self.valid_mask[[v, u]].then(|| [self.aerial_px[[v, u, 0]], self.aerial_px[[v, u, 1]]])
    }

    /// `[H, W, 3]` tensor of `(x_px, y_px, valid)`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = self.valid_mask.dim();
        let data = Array3::from_shape_fn((h, w, 3), |(v, u, k)| match k {
            2 => f64::from(u8::from(self.valid_mask[[v, u]])),
            _ => self.aerial_px[[v, u, k]],
        });
        Tensor::from_array(&data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let a: Array3<f64> = t.to_array()?;
        let (h, w, k) = a.dim();
        if k != 3 {
            return Err(Error::ShapeMismatch(format!(
                "ground-truth projection needs [H, W, 3], got {:?}",
                t.dims()
            )));
        }
        let valid_mask = Array2::from_shape_fn((h, w), |(v, u)| a[[v, u, 2]] != 0.0);
        let aerial_px = Array3::from_shape_fn((h, w, 2), |(v, u, k)| a[[v, u, k]]);
        Ok(Self {
            aerial_px,
            valid_mask,
        })
    }
}

/// Back-projects every panorama pixel along its ray to `depth`, moves the
/// point into the aerial image under `gt` and keeps it when it is within
/// range and inside the image. Non-finite or non-positive depth is invalid.
pub fn build_gt_projection(
    depth: &Array2<f64>,
    intr: &CameraIntrinsics,
    gt: &Pose3DoF,
    meta: &AerialMeta,
    cfg: &ProjectionConfig,
) -> Result<GroundTruthProjection> {
    let (h, w) = depth.dim();
    if (h, w) != (intr.pano_h(), intr.pano_w()) {
        return Err(Error::ShapeMismatch(format!(
            "depth map {h}x{w} vs {}x{} panorama",
            intr.pano_h(),
            intr.pano_w()
        )));
    }
    if cfg.max_range_m.is_nan() || cfg.max_range_m <= 0.0 {
        return Err(Error::InvalidConfig(format!("range limit {} must be positive", cfg.max_range_m)));
    }
    let rows = par::map_range(h, |v| {
        (0..w)
            .map(|u| {
                let d = depth[[v, u]];
                if !(d.is_finite() && d > 0.0) {
                    return None;
                }
                let (az, el) = intr.pixel_to_ray(u as f64, v as f64);
                let planar = d * el.cos();
                let range = match cfg.range_mode {
                    RangeMode::Ray3d => d,
                    RangeMode::Planar => planar,
                };
                if range > cfg.max_range_m {
                    return None;
                }
                let px = metric_to_aerial_px(meta, gt, planar * az.cos(), planar * az.sin());
                meta.contains(px).then_some(px)
            })
            .collect::<Vec<_>>()
    });
    let mut aerial_px = Array3::zeros((h, w, 2));
    let mut valid_mask = Array2::from_elem((h, w), false);
    for (v, row) in rows.into_iter().enumerate() {
        for (u, p) in row.into_iter().enumerate() {
            if let Some(p) = p {
                aerial_px[[v, u, 0]] = p[0];
                aerial_px[[v, u, 1]] = p[1];
                valid_mask[[v, u]] = true;
            }
        }
    }
    Ok(GroundTruthProjection {
        aerial_px,
        valid_mask,
    })
}

/// One predicted match: panorama pixel and aerial pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedMatch {
    pub xg: f64,
    pub yg: f64,
    pub xs: f64,
    pub ys: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchPrediction {
    pub pairs: Vec<PredictedMatch>,
}

impl MatchPrediction {
    /// Reads `xg,yg,xs,ys` rows with a header line.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut pairs = Vec::new();
        for rec in rdr.deserialize::<PredictedMatch>() {
            pairs.push(rec.map_err(|e| csv_error(path, e))?);
        }
        Ok(Self { pairs })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for p in &self.pairs {
            w.serialize(p).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub num_matches: usize,
    pub thresholds_px: Vec<f64>,
    pub success_ratios: Vec<f64>,
    pub valid_ratio: f64,
}

impl MatchingReport {
    /// `(metric, value)` rows for CSV output.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self
            .thresholds_px
            .iter()
            .zip(&self.success_ratios)
            .map(|(t, r)| (format!("success@{t}px"), *r))
            .collect();
        rows.push(("valid_ratio".into(), self.valid_ratio));
        rows.push(("num_matches".into(), self.num_matches as f64));
        rows
    }
}

/// Fraction of predicted matches whose aerial pixel lies within each
/// threshold (Euclidean) of the ground-truth projection. Matches whose
/// ground pixel is outside the valid region count in the denominator only.
pub fn matching_success_ratio(
    pred: &MatchPrediction,
    gt: &GroundTruthProjection,
    thresholds_px: &[f64],
) -> Result<MatchingReport> {
    if pred.pairs.is_empty() {
        return Err(Error::Empty("prediction set"));
    }
    if let Some(t) = thresholds_px.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::InvalidConfig(format!("threshold {t} px must be positive")));
    }
    let errors: Vec<Option<f64>> = pred
        .pairs
        .iter()
        .map(|m| gt.lookup(m.xg, m.yg).map(|g| (m.xs - g[0]).hypot(m.ys - g[1])))
        .collect();
    let total = pred.pairs.len() as f64;
    let success_ratios = thresholds_px
        .iter()
        .map(|&t| errors.iter().filter(|e| e.is_some_and(|e| e <= t)).count() as f64 / total)
        .collect();
    Ok(MatchingReport {
        num_matches: pred.pairs.len(),
        thresholds_px: thresholds_px.to_vec(),
        success_ratios,
        valid_ratio: errors.iter().filter(|e| e.is_some()).count() as f64 / total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationStats {
    pub count: usize,
    pub mean_trans_m: f64,
    pub median_trans_m: f64,
    pub mean_orient_deg: f64,
    pub median_orient_deg: f64,
}

impl LocalizationStats {
    pub fn rows(&self) -> Vec<(String, f64)> {
        vec![
            ("mean_trans_m".into(), self.mean_trans_m),
            ("median_trans_m".into(), self.median_trans_m),
            ("mean_orient_deg".into(), self.mean_orient_deg),
            ("median_orient_deg".into(), self.median_orient_deg),
            ("count".into(), self.count as f64),
        ]
    }
}

/// Lower-middle element for even counts.
fn lower_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

pub fn localization_stats(errors: &[PoseError]) -> Result<LocalizationStats> {
    if errors.is_empty() {
        return Err(Error::Empty("localization error list"));
    }
    if errors.iter().any(|e| !(e.trans_m.is_finite() && e.orient_deg.is_finite())) {
        return Err(Error::NonFinite("localization errors"));
    }
    let n = errors.len() as f64;
    let trans: Vec<f64> = errors.iter().map(|e| e.trans_m).collect();
    let orient: Vec<f64> = errors.iter().map(|e| e.orient_deg).collect();
    Ok(LocalizationStats {
        count: errors.len(),
        mean_trans_m: trans.iter().sum::<f64>() / n,
        mean_orient_deg: orient.iter().sum::<f64>() / n,
        median_trans_m: lower_median(trans),
        median_orient_deg: lower_median(orient),
    })
}

/// Predicted pose of one scene, as read from a localization CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePrediction {
    pub scene: String,
    pub tx_px: f64,
    pub ty_px: f64,
    pub yaw_deg: f64,
}

impl PosePrediction {
    pub fn pose(&self) -> Pose3DoF {
        Pose3DoF::new(self.tx_px, self.ty_px, self.yaw_deg.to_radians())
    }

    /// Reads `scene,tx_px,ty_px,yaw_deg` rows, sorted by scene id.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<Self>> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<PosePrediction>() {
            rows.push(rec.map_err(|e| csv_error(path, e))?);
        }
        rows.sort_by(|a, b| a.scene.cmp(&b.scene));
        Ok(rows)
    }
}

/// Writes `metric,value` rows.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[(String, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["metric", "value"]).map_err(|e| csv_error(path, e))?;
    for (k, v) in rows {
        w.write_record([k.as_str(), &v.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn identity_setup() -> (CameraIntrinsics, AerialMeta, Pose3DoF) {
        let intr = CameraIntrinsics::new(1024, 512, 2.5).unwrap();
        let meta = AerialMeta::new(0.12, 640).unwrap();
        (intr, meta, Pose3DoF::identity_at([320.0, 320.0]))
    }

    #[test]
    fn straight_ahead_pixel() {
        let (intr, meta, gt) = identity_setup();
        let mut depth = Array2::from_elem((512, 1024), f64::NAN);
        depth[[256, 512]] = 12.0;
        depth[[256, 0]] = 31.0;
        let p = build_gt_projection(&depth, &intr, &gt, &meta, &ProjectionConfig::default()).unwrap();
        let a = p.lookup(512.0, 256.0).unwrap();
        assert_abs_diff_eq!(a[0], 420.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a[1], 320.0, epsilon = 1e-9);
        assert!(p.lookup(0.0, 256.0).is_none());
        assert_eq!(p.valid_count(), 1);
    }

    #[test]
    fn planar_range_mode_keeps_steep_rays() {
        let (intr, meta, gt) = identity_setup();
        let mut depth = Array2::from_elem((512, 1024), f64::INFINITY);
        // 45 degrees below the horizon: ray range 40 m, planar 28.3 m.
        let v = 384;
        depth[[v, 512]] = 40.0;
        let ray = build_gt_projection(&depth, &intr, &gt, &meta, &ProjectionConfig::default()).unwrap();
        assert_eq!(ray.valid_count(), 0);
        let cfg = ProjectionConfig {
            range_mode: RangeMode::Planar,
            ..Default::default()
        };
        let planar = build_gt_projection(&depth, &intr, &gt, &meta, &cfg).unwrap();
        let a = planar.lookup(512.0, v as f64).unwrap();
        assert_abs_diff_eq!(a[0], 320.0 + 40.0 * 0.5f64.sqrt() / 0.12, epsilon = 1e-6);
    }

    #[test]
    fn lookup_wraps_columns() {
        let (intr, meta, gt) = identity_setup();
        let mut depth = Array2::from_elem((512, 1024), -1.0);
        depth[[300, 0]] = 5.0;
        let p = build_gt_projection(&depth, &intr, &gt, &meta, &ProjectionConfig::default()).unwrap();
        assert_eq!(p.lookup(1024.2, 300.0), p.lookup(0.0, 300.0));
        assert!(p.lookup(0.0, 300.0).is_some());
        assert!(p.lookup(0.0, 512.0).is_none());
    }

    #[test]
    fn tensor_round_trip() {
        let (intr, meta, gt) = identity_setup();
        let depth = Array2::from_shape_fn((512, 1024), |(v, u)| ((v + u) % 40) as f64);
        let p = build_gt_projection(&depth, &intr, &gt, &meta, &ProjectionConfig::default()).unwrap();
        let q = GroundTruthProjection::from_tensor(&p.to_tensor()).unwrap();
        assert_eq!(q.valid_mask, p.valid_mask);
        for (a, b) in q.aerial_px.iter().zip(p.aerial_px.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    fn fixture_projection() -> GroundTruthProjection {
        let mut aerial_px = Array3::zeros((4, 8, 2));
        let mut valid_mask = Array2::from_elem((4, 8), false);
        for u in 0..8 {
            valid_mask[[1, u]] = true;
            aerial_px[[1, u, 0]] = 100.0 + u as f64;
            aerial_px[[1, u, 1]] = 200.0;
        }
        GroundTruthProjection {
            aerial_px,
            valid_mask,
        }
    }

    fn pair(u: f64, v: f64, xs: f64, ys: f64) -> PredictedMatch {
        PredictedMatch { xg: u, yg: v, xs, ys }
    }

    #[test]
    fn planted_success_ratio() {
        let gt = fixture_projection();
        let mut pairs: Vec<_> = (0..12).map(|i| pair((i % 8) as f64, 1.0, 100.0 + (i % 8) as f64 + 3.0, 204.0)).collect();
        pairs.extend((0..18).map(|_| pair(2.0, 3.0, 0.0, 0.0)));
        let r = matching_success_ratio(&MatchPrediction { pairs }, &gt, &DEFAULT_THRESHOLDS_PX).unwrap();
        assert_eq!(r.success_ratios, vec![0.4, 0.4, 0.4]);
        assert_eq!(r.valid_ratio, 0.4);
        assert_eq!(r.num_matches, 30);
    }

    #[test]
    fn invalid_region_never_correct() {
        let gt = fixture_projection();
        let pairs = vec![pair(0.0, 0.0, 0.0, 0.0), pair(0.0, 1.0, 100.0, 200.0)];
        let r = matching_success_ratio(&MatchPrediction { pairs }, &gt, &[1e6]).unwrap();
        assert_eq!(r.success_ratios, vec![0.5]);
        assert_eq!(r.valid_ratio, 0.5);
    }

    #[test]
    fn ratio_errors() {
        let gt = fixture_projection();
        assert!(matches!(
            matching_success_ratio(&MatchPrediction::default(), &gt, &[5.0]),
            Err(Error::Empty(_))
        ));
        let one = MatchPrediction {
            pairs: vec![pair(0.0, 1.0, 0.0, 0.0)],
        };
        assert!(matching_success_ratio(&one, &gt, &[0.0]).is_err());
    }

    #[test]
    fn stats_examples() {
        let e = |t, o| PoseError {
            trans_m: t,
            orient_deg: o,
        };
        let s = localization_stats(&[e(1.0, 10.0), e(3.0, 30.0)]).unwrap();
        assert_eq!((s.mean_trans_m, s.mean_orient_deg), (2.0, 20.0));
        assert_eq!((s.median_trans_m, s.median_orient_deg), (1.0, 10.0));
        let s = localization_stats(&[e(4.5, 2.0)]).unwrap();
        assert_eq!((s.mean_trans_m, s.median_trans_m), (4.5, 4.5));
        let s = localization_stats(&[e(7.0, 1.0), e(3.0, 2.0), e(5.0, 9.0)]).unwrap();
        assert_eq!((s.median_trans_m, s.median_orient_deg), (5.0, 2.0));
        assert!(localization_stats(&[]).is_err());
    }

    #[test]
    fn csv_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "xg,yg,xs,ys\n1,2,3,4\n1,2,x,4").unwrap();
        match MatchPrediction::read_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prediction_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        let pred = MatchPrediction {
            pairs: vec![pair(1.5, 2.0, 300.25, 12.0), pair(0.0, 0.0, 1.0, 1.0)],
        };
        pred.write_csv(&path).unwrap();
        assert_eq!(MatchPrediction::read_csv(&path).unwrap(), pred);
    }
}
