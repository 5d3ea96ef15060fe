//! Training objectives, evaluated forward only.
//!
//! All sampling is driven by `LossConfig::rng_seed`: the virtual points use
//! ChaCha stream 0 and the patch-pair draw uses stream 1, so each loss is
//! reproducible bit for bit.

use ndarray::Array2;
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate, AerialMeta, CrossViewFrame, Pose3DoF};
use crate::refiner::SimilarityMatrix;
use crate::surface::SurfaceMap;

/// Unit of the height-consistency residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeightUnits {
    #[default]
    LayerIndex,
    Meters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub beta1: f64,
    pub beta2: f64,
    /// Virtual points for the correspondence error.
    pub n_v: usize,
    /// Side of the square the virtual points are drawn from, meters.
    pub l_v_m: f64,
    /// Sampled patch pairs for the matching and height losses.
    pub n_s: usize,
    pub k_norm: f64,
    pub rng_seed: u64,
    pub height_units: HeightUnits,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 1.0,
            n_v: 100,
            l_v_m: 5.0,
            n_s: 1024,
            k_norm: 100.0,
            rng_seed: 0,
            height_units: HeightUnits::LayerIndex,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.beta1, self.beta2, self.l_v_m, self.k_norm]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !positive || self.n_v == 0 || self.n_s == 0 {
            return Err(Error::InvalidConfig(format!("loss config {self:?} has non-positive entries")));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(stream);
        rng
    }
}

/// Virtual points, uniform over the centred `l_v x l_v` square.
pub fn virtual_points(cfg: &LossConfig) -> Vec<[f64; 2]> {
    let mut rng = cfg.rng(0);
    let h = cfg.l_v_m / 2.0;
    (0..cfg.n_v)
        .map(|_| [rng.random_range(-h..=h), rng.random_range(-h..=h)])
        .collect()
}

/// Mean distance between the virtual points mapped by `pred` and by `gt`.
pub fn vce_loss(pred: &Pose3DoF, gt: &Pose3DoF, meta: &AerialMeta, cfg: &LossConfig) -> f64 {
    let dt = [
        (pred.t_px[0] - gt.t_px[0]) * meta.gsd(),
        (pred.t_px[1] - gt.t_px[1]) * meta.gsd(),
    ];
    let pts = virtual_points(cfg);
    let total: f64 = pts
        .iter()
        .map(|&p| {
            let a = rotate(pred.yaw_rad, p);
            let b = rotate(gt.yaw_rad, p);
            ((a[0] - b[0]) + dt[0]).hypot((a[1] - b[1]) + dt[1])
        })
        .sum();
    total / pts.len() as f64
}

/// Up to `n_s` distinct ground-truth patch pairs, drawn without replacement
/// from those whose target lands on the aerial grid.
pub fn sample_gt_pairs(frame: &CrossViewFrame, gt: &Pose3DoF, cfg: &LossConfig) -> Result<Vec<(usize, usize)>> {
    let valid = frame.gt_pairs(gt);
    if valid.is_empty() {
        return Err(Error::NoValidPairs);
    }
    let mut rng = cfg.rng(1);
    let amount = cfg.n_s.min(valid.len());
    let mut picked = rand::seq::index::sample(&mut rng, valid.len(), amount).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| valid[i]).collect())
}

fn log_softmax_at(values: impl Iterator<Item = f64> + Clone, target: f64) -> f64 {
    let mx = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = values.map(|v| (v - mx).exp()).sum();
    (target - mx) - z.ln()
}

/// Symmetric InfoNCE over the pairs: row-wise cross-entropy for
/// ground-to-aerial and column-wise for aerial-to-ground, averaged.
pub fn matching_loss_on_pairs(s: &Array2<f64>, pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::NoValidPairs);
    }
    let n = pairs.len() as f64;
    let mut g2s = 0.0;
    let mut s2g = 0.0;
    for &(g, a) in pairs {
        let target = s[[g, a]];
        g2s -= log_softmax_at(s.row(g).iter().copied(), target);
        s2g -= log_softmax_at(s.column(a).iter().copied(), target);
    }
    Ok(0.5 * (g2s / n + s2g / n))
}

pub fn matching_loss(
    s_orig: &SimilarityMatrix,
    gt: &Pose3DoF,
    frame: &CrossViewFrame,
    cfg: &LossConfig,
) -> Result<f64> {
    if s_orig.patches() != frame.grid.num_cells() {
        return Err(Error::ShapeMismatch(format!(
            "{} patches vs a {}-cell grid",
            s_orig.patches(),
            frame.grid.num_cells()
        )));
    }
    let pairs = sample_gt_pairs(frame, gt, cfg)?;
    matching_loss_on_pairs(&s_orig.s, &pairs)
}

/// Mean L1 height disagreement over the pairs, divided by `k_norm`.
pub fn height_loss_on_pairs(
    surf_grd: &SurfaceMap,
    surf_sat: &SurfaceMap,
    pairs: &[(usize, usize)],
    cfg: &LossConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::NoValidPairs);
    }
    let n = surf_grd.n();
    let cell = |p: usize| [p / n, p % n];
    let sum: f64 = pairs
        .iter()
        .map(|&(g, a)| match cfg.height_units {
            HeightUnits::LayerIndex => {
                (surf_grd.index[cell(g)] as f64 - surf_sat.index[cell(a)] as f64).abs()
            }
            HeightUnits::Meters => (surf_grd.height_m[cell(g)] - surf_sat.height_m[cell(a)]).abs(),
        })
        .sum();
    Ok(sum / (pairs.len() as f64 * cfg.k_norm))
}

pub fn height_loss(
    surf_grd: &SurfaceMap,
    surf_sat: &SurfaceMap,
    gt: &Pose3DoF,
    frame: &CrossViewFrame,
    cfg: &LossConfig,
) -> Result<f64> {
    let n = frame.grid.n();
    if surf_grd.index.dim() != (n, n) || surf_sat.index.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "surface maps {:?} / {:?} vs a {n}x{n} grid",
            surf_grd.index.shape(),
            surf_sat.index.shape()
        )));
    }
    let pairs = sample_gt_pairs(frame, gt, cfg)?;
    height_loss_on_pairs(surf_grd, surf_sat, &pairs, cfg)
}

/// `vce + beta1 * matching + beta2 * height`
pub fn total_loss(vce: f64, matching: f64, height: f64, cfg: &LossConfig) -> f64 {
    vce + cfg.beta1 * matching + cfg.beta2 * height
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub vce: f64,
    pub matching: f64,
    pub height: f64,
    pub total: f64,
    pub seed: u64,
}

impl LossReport {
    pub fn new(vce: f64, matching: f64, height: f64, cfg: &LossConfig) -> Self {
        Self {
            vce,
            matching,
            height,
            total: total_loss(vce, matching, height, cfg),
            seed: cfg.rng_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BevGridSpec;
    use approx::assert_abs_diff_eq;

    fn frame(n: usize) -> CrossViewFrame {
        let meta = AerialMeta::new(0.5, 200).unwrap();
        CrossViewFrame::new(BevGridSpec::new(n, (n - 1) as f64).unwrap(), meta, [100.0, 100.0])
    }

    #[test]
    fn vce_zero_and_translation() {
        let meta = AerialMeta::new(0.12, 640).unwrap();
        let cfg = LossConfig::default();
        let gt = Pose3DoF::new(300.0, 310.0, 0.4);
        assert_eq!(vce_loss(&gt, &gt, &meta, &cfg), 0.0);
        let meta1 = AerialMeta::new(1.0, 640).unwrap();
        let pred = Pose3DoF::new(303.0, 314.0, 0.4);
        assert_eq!(vce_loss(&pred, &gt, &meta1, &cfg), 5.0);
    }

    #[test]
    fn vce_pure_rotation_matches_summation() {
        let meta = AerialMeta::new(0.12, 640).unwrap();
        let cfg = LossConfig {
            rng_seed: 9,
            ..Default::default()
        };
        let theta = 0.3;
        let gt = Pose3DoF::new(10.0, 10.0, 0.0);
        let pred = Pose3DoF::new(10.0, 10.0, theta);
        let pts = virtual_points(&cfg);
        let mean_norm = pts.iter().map(|p| p[0].hypot(p[1])).sum::<f64>() / pts.len() as f64;
        assert_abs_diff_eq!(
            vce_loss(&pred, &gt, &meta, &cfg),
            2.0 * (theta / 2.0).sin() * mean_norm,
            epsilon = 1e-12
        );
        assert!(pts.iter().all(|p| p[0].abs() <= 2.5 && p[1].abs() <= 2.5));
    }

    #[test]
    fn matching_loss_uniform_is_log_patches() {
        let f = frame(5);
        let s = SimilarityMatrix::new(Array2::from_elem((25, 25), 0.7), 0.1).unwrap();
        let gt = Pose3DoF::identity_at([100.0, 100.0]);
        let l = matching_loss(&s, &gt, &f, &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(l, 25f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn matching_loss_perfect_logits() {
        let f = frame(5);
        let gt = Pose3DoF::identity_at([100.0, 100.0]);
        let mut s = Array2::zeros((25, 25));
        for (g, a) in f.gt_pairs(&gt) {
            s[[g, a]] = 100.0;
        }
        let s = SimilarityMatrix::new(s, 0.1).unwrap();
        assert!(matching_loss(&s, &gt, &f, &LossConfig::default()).unwrap() < 1e-40);
    }

    #[test]
    fn matching_loss_needs_overlap() {
        let f = frame(5);
        let s = SimilarityMatrix::new(Array2::zeros((25, 25)), 0.1).unwrap();
        let far = Pose3DoF::identity_at([180.0, 180.0]);
        assert!(matches!(
            matching_loss(&s, &far, &f, &LossConfig::default()),
            Err(Error::NoValidPairs)
        ));
    }

    #[test]
    fn sampling_caps_and_is_distinct() {
        let f = frame(9);
        let gt = Pose3DoF::new(104.0, 98.0, 0.0);
        let cfg = LossConfig {
            n_s: 20,
            ..Default::default()
        };
        let pairs = sample_gt_pairs(&f, &gt, &cfg).unwrap();
        assert_eq!(pairs.len(), 20);
        let mut g: Vec<_> = pairs.iter().map(|p| p.0).collect();
        g.dedup();
        assert_eq!(g.len(), 20);
        let all = sample_gt_pairs(&f, &gt, &LossConfig::default()).unwrap();
        assert_eq!(all, f.gt_pairs(&gt));
    }

    #[test]
    fn height_loss_offset() {
        use crate::geometry::HeightLayerSpec;
        let l = HeightLayerSpec::new(11, -10.0, 10.0).unwrap();
        let f = frame(5);
        let gt = Pose3DoF::identity_at([100.0, 100.0]);
        let a = SurfaceMap::from_indices(Array2::from_elem((5, 5), 4), &l).unwrap();
        let b = SurfaceMap::from_indices(Array2::from_elem((5, 5), 5), &l).unwrap();
        let cfg = LossConfig::default();
        assert_eq!(height_loss(&a, &a, &gt, &f, &cfg).unwrap(), 0.0);
        assert_eq!(height_loss(&a, &b, &gt, &f, &cfg).unwrap(), 0.01);
        let meters = LossConfig {
            height_units: HeightUnits::Meters,
            ..Default::default()
        };
        assert_abs_diff_eq!(height_loss(&a, &b, &gt, &f, &meters).unwrap(), 0.02, epsilon = 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &cfg), 3.0);
        let half = LossConfig {
            beta1: 0.5,
            ..Default::default()
        };
        assert_eq!(total_loss(0.5, 2.0, 0.0, &half), 1.5);
        let r = LossReport::new(0.25, 1.5, 0.125, &half);
        assert_eq!(r.total, 0.25 + 0.5 * 1.5 + 0.125);
    }
}
