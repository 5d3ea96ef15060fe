//! The stages chained from ground feature volume to camera pose.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{CrossViewFrame, Pose3DoF};
use crate::pose::{solve_translation_only, solve_weighted_procrustes, Correspondence, CorrespondenceSet, RigidTransform2};
use crate::refiner::{
    dustbin_extend, dustbin_extend_with, extract_matches, Dustbin, initial_similarity, normalize_doubly_stochastic, refine, Match,
    MatchRule, RefinerParams, SimilarityMatrix, DEFAULT_TAU,
};
use crate::surface::{
    fuse_height_features, normalize_confidence, surface_from_accumulation, BevFeatureMap, FeatureVolume,
    FusionConfig, SurfaceMap, DEFAULT_SURFACE_THRESHOLD,
};

/// Default number of correspondences handed to the solver.
pub const DEFAULT_TOP_K: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub threshold: f64,
    pub tau: f64,
    pub top_k: usize,
    pub rule: MatchRule,
    /// Solve translation only with this yaw.
    pub known_yaw_rad: Option<f64>,
    pub fusion: FusionConfig,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_SURFACE_THRESHOLD,
            tau: DEFAULT_TAU,
            top_k: DEFAULT_TOP_K,
            rule: MatchRule::MutualFirst,
            known_yaw_rad: None,
            fusion: FusionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutput {
    pub pose: Pose3DoF,
    pub transform: RigidTransform2,
    pub matches: Vec<Match>,
    pub degenerate: bool,
    pub surface: SurfaceMap,
    pub refined: bool,
}

/// Pose summary written by the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub tx_px: f64,
    pub ty_px: f64,
    pub yaw_deg: f64,
    pub num_matches: usize,
    pub degenerate_flag: bool,
}

impl SolveOutput {
    pub fn report(&self) -> PoseReport {
        PoseReport {
            tx_px: self.pose.t_px[0],
            ty_px: self.pose.t_px[1],
            yaw_deg: self.pose.yaw_rad.to_degrees(),
            num_matches: self.matches.len(),
            degenerate_flag: self.degenerate,
        }
    }
}

/// Surface selection and height fusion of the ground volume.
pub fn ground_bev(
    volume: &FeatureVolume,
    conf_logits: &Array3<f64>,
    threshold: f64,
    fusion: &FusionConfig,
) -> Result<(SurfaceMap, BevFeatureMap)> {
    let conf = normalize_confidence(conf_logits, volume.layers())?;
    let surface = surface_from_accumulation(&conf, threshold)?;
    let fused = fuse_height_features(volume, &conf, &surface, fusion, None)?;
    Ok((surface, fused))
}

/// Ground patch centres (BEV meters) against aerial patch centres (aerial
/// pixels times GSD), weighted by match probability.
pub fn matches_to_correspondences(frame: &CrossViewFrame, matches: &[Match]) -> Result<CorrespondenceSet> {
    let pairs = matches
        .iter()
        .map(|m| {
            let (gx, gy) = frame.grid.patch_to_metric(m.ground_patch);
            Correspondence::new([gx, gy], frame.aerial_patch_m(m.aerial_patch), m.weight)
        })
        .collect();
    CorrespondenceSet::new(pairs)
}

/// Runs surface model, similarity, optional refinement, normalization,
/// match extraction and pose recovery. Without `params` the similarity is
/// used unrefined and the dustbin scores are zero.
pub fn solve(
    volume: &FeatureVolume,
    conf_logits: &Array3<f64>,
    aerial: &BevFeatureMap,
    frame: &CrossViewFrame,
    params: Option<&RefinerParams>,
    cfg: &SolveConfig,
) -> Result<SolveOutput> {
    let (surface, ground) = ground_bev(volume, conf_logits, cfg.threshold, &cfg.fusion)?;
    let s = initial_similarity(&ground, aerial, cfg.tau)?;
    let extended = match params {
        Some(p) => dustbin_extend(&refine(&s, p)?, p)?,
        None => dustbin_extend_with(&s, &Dustbin::zeros(s.patches()))?,
    };
    let probs = normalize_doubly_stochastic(&extended)?;
    let matches = extract_matches(&probs, cfg.top_k, cfg.rule)?;
    let corr = matches_to_correspondences(frame, &matches)?;
    let (transform, degenerate) = match cfg.known_yaw_rad {
        Some(yaw) => (solve_translation_only(&corr, yaw)?, false),
        None => {
            let sol = solve_weighted_procrustes(&corr)?;
            (sol.transform, sol.degenerate)
        }
    };
    Ok(SolveOutput {
        pose: transform.to_pose(&frame.aerial),
        transform,
        matches,
        degenerate,
        surface,
        refined: params.is_some(),
    })
}

/// Initial (unrefined) similarity of a scene, as used by the matching loss.
pub fn scene_similarity(
    volume: &FeatureVolume,
    conf_logits: &Array3<f64>,
    aerial: &BevFeatureMap,
    cfg: &SolveConfig,
) -> Result<(SurfaceMap, SimilarityMatrix)> {
    let (surface, ground) = ground_bev(volume, conf_logits, cfg.threshold, &cfg.fusion)?;
    Ok((surface, initial_similarity(&ground, aerial, cfg.tau)?))
}
