//! Closed-form planar pose recovery from weighted correspondences.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate, wrap_angle, AerialMeta, Pose3DoF};

/// Frobenius norm of the weighted cross-covariance below which the rotation
/// is treated as undetermined.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

/// A ground BEV point and its aerial counterpart, both in meters.
///
/// Aerial coordinates are aerial pixel coordinates scaled by the GSD, so a
/// recovered translation divided by the GSD is directly in aerial pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    #[serde(rename = "gx")]
    pub ground_x: f64,
    #[serde(rename = "gy")]
    pub ground_y: f64,
    #[serde(rename = "ax")]
    pub aerial_x: f64,
    #[serde(rename = "ay")]
    pub aerial_y: f64,
    #[serde(rename = "w")]
    pub weight: f64,
}

impl Correspondence {
    pub fn new(ground: [f64; 2], aerial: [f64; 2], weight: f64) -> Self {
        Self {
            ground_x: ground[0],
            ground_y: ground[1],
            aerial_x: aerial[0],
            aerial_y: aerial[1],
            weight,
        }
    }

    pub fn ground(&self) -> [f64; 2] {
        [self.ground_x, self.ground_y]
    }

    pub fn aerial(&self) -> [f64; 2] {
        [self.aerial_x, self.aerial_y]
    }
}

/// Validated weighted correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            let coords = [p.ground_x, p.ground_y, p.aerial_x, p.aerial_y];
            if coords.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidCorrespondence(format!("pair {i} has non-finite coordinates")));
            }
            if !(p.weight.is_finite() && p.weight >= 0.0) {
                return Err(Error::InvalidCorrespondence(format!(
                    "pair {i} has weight {}",
                    p.weight
                )));
            }
        }
        if !pairs.iter().any(|p| p.weight > 0.0) {
            return Err(Error::NoPositiveWeight);
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[Correspondence] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Reads `gx,gy,ax,ay,w` rows with a header line.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut pairs = Vec::new();
        for rec in rdr.deserialize::<Correspondence>() {
            pairs.push(rec.map_err(|e| csv_error(path, e))?);
        }
        Self::new(pairs)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for p in &self.pairs {
            w.serialize(p).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Weights rescaled to sum to one.
    fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.pairs.iter().map(|p| p.weight).sum();
        self.pairs.iter().map(|p| p.weight / total).collect()
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Rotation then translation, in meters: `a = R(yaw) g + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2 {
    pub yaw_rad: f64,
    pub t_m: [f64; 2],
}

impl RigidTransform2 {
    pub fn apply(&self, g: [f64; 2]) -> [f64; 2] {
        let r = rotate(self.yaw_rad, g);
        [r[0] + self.t_m[0], r[1] + self.t_m[1]]
    }

    pub fn to_pose(&self, meta: &AerialMeta) -> Pose3DoF {
        Pose3DoF::new(
            self.t_m[0] / meta.gsd(),
            self.t_m[1] / meta.gsd(),
            self.yaw_rad,
        )
    }

    pub fn from_pose(pose: &Pose3DoF, meta: &AerialMeta) -> Self {
        Self {
            yaw_rad: pose.yaw_rad,
            t_m: [pose.t_px[0] * meta.gsd(), pose.t_px[1] * meta.gsd()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcrustesSolution {
    pub transform: RigidTransform2,
    /// Rotation was undetermined; yaw fixed to zero and only translation solved.
    pub degenerate: bool,
}

fn weighted_centroids(c: &CorrespondenceSet, w: &[f64]) -> ([f64; 2], [f64; 2]) {
    let mut g = [0.0; 2];
    let mut a = [0.0; 2];
    for (p, &wi) in c.pairs.iter().zip(w) {
        g[0] += wi * p.ground_x;
        g[1] += wi * p.ground_y;
        a[0] += wi * p.aerial_x;
        a[1] += wi * p.aerial_y;
    }
    (g, a)
}

/// Global minimiser of `sum w_i |R g_i + t - a_i|^2` over proper rotations.
///
/// The 2x2 weighted cross-covariance `H = sum w g a^T` of the centred points
/// determines the rotation angle directly as
/// `atan2(H01 - H10, H00 + H11)`, which is always a proper rotation.
pub fn solve_weighted_procrustes(c: &CorrespondenceSet) -> Result<ProcrustesSolution> {
    let w = c.normalized_weights();
    let (gc, ac) = weighted_centroids(c, &w);
    let mut h = [[0.0; 2]; 2];
    for (p, &wi) in c.pairs.iter().zip(&w) {
        let g = [p.ground_x - gc[0], p.ground_y - gc[1]];
        let a = [p.aerial_x - ac[0], p.aerial_y - ac[1]];
        for r in 0..2 {
            for s in 0..2 {
                h[r][s] += wi * g[r] * a[s];
            }
        }
    }
    let frob = h.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if frob < DEGENERACY_THRESHOLD {
        return Ok(ProcrustesSolution {
            transform: solve_translation_only(c, 0.0)?,
            degenerate: true,
        });
    }
    let yaw = (h[0][1] - h[1][0]).atan2(h[0][0] + h[1][1]);
    let rg = rotate(yaw, gc);
    Ok(ProcrustesSolution {
        transform: RigidTransform2 {
            yaw_rad: wrap_angle(yaw),
            t_m: [ac[0] - rg[0], ac[1] - rg[1]],
        },
        degenerate: false,
    })
}

/// Translation minimising the weighted residual with the yaw held fixed.
pub fn solve_translation_only(c: &CorrespondenceSet, yaw_fixed: f64) -> Result<RigidTransform2> {
    let w = c.normalized_weights();
    let mut t = [0.0; 2];
    for (p, &wi) in c.pairs.iter().zip(&w) {
        let r = rotate(yaw_fixed, p.ground());
        t[0] += wi * (p.aerial_x - r[0]);
        t[1] += wi * (p.aerial_y - r[1]);
    }
    Ok(RigidTransform2 {
        yaw_rad: wrap_angle(yaw_fixed),
        t_m: t,
    })
}

/// Translation error in meters and absolute orientation error in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub trans_m: f64,
    pub orient_deg: f64,
}

pub fn pose_error(pred: &Pose3DoF, gt: &Pose3DoF, meta: &AerialMeta) -> PoseError {
    let dx = pred.t_px[0] - gt.t_px[0];
    let dy = pred.t_px[1] - gt.t_px[1];
    PoseError {
        trans_m: dx.hypot(dy) * meta.gsd(),
        orient_deg: wrap_angle(pred.yaw_rad - gt.yaw_rad).abs().to_degrees(),
    }
}
