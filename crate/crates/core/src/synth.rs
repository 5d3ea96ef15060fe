//! Seeded synthetic worlds with exact ground truth for every stage.
//!
//! A scene is defined in the ground BEV frame: a height field and a unit-norm
//! feature per cell. The aerial grid is axis-aligned around the aerial image
//! centre and sees the scene through the ground-truth pose; aerial cells
//! outside the ground view hold independent random features at ground level.
//!
//! Every generated value is rounded to f32 and heights to multiples of
//! 1/1024 m, so scenes survive the tensor format unchanged and pseudo-depth
//! arithmetic is exact.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{build_gt_projection, GroundTruthProjection, ProjectionConfig};
use crate::geometry::{CrossViewFrame, Geometry, GeometryConfig, Pose3DoF};
use crate::surface::{
    BevFeatureMap, DepthScale, FeatureVolume, SurfaceMap, DEFAULT_GROUND_ANCHOR_M,
};
use crate::tensor::Tensor;

/// Logit given to the true surface layer.
pub const PEAK_LOGIT: f64 = 8.0;

const HEIGHT_QUANTUM: f64 = 1024.0;
const MAX_BUMPS: usize = 4;
const BUMP_TRUNCATION: f64 = 2.5;

const STREAM_HEIGHT: u64 = 0;
const STREAM_TEXTURE: u64 = 1;
const STREAM_POSE: u64 = 2;
const STREAM_GROUND_NOISE: u64 = 3;
const STREAM_AERIAL_NOISE: u64 = 4;
const STREAM_OUTSIDE: u64 = 5;
const STREAM_LOGIT_NOISE: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseMode {
    /// Translation a whole number of cells from the aerial centre, yaw a
    /// multiple of 90 degrees.
    #[default]
    GridSnapped,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub geometry: GeometryConfig,
    pub channels: usize,
    pub pose_mode: PoseMode,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::default(),
            channels: 32,
            pose_mode: PoseMode::GridSnapped,
        }
    }
}

impl SceneConfig {
    pub fn with_n(n: usize) -> Self {
        let mut cfg = Self::default();
        let spacing = cfg.geometry.extent_m / (cfg.geometry.n - 1) as f64;
        cfg.geometry.n = n;
        cfg.geometry.extent_m = spacing * (n - 1) as f64;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub geometry: Geometry,
    pub frame: CrossViewFrame,
    /// `[N, N]`, ground BEV frame.
    pub height_field_m: Array2<f64>,
    /// `[N, N, c]`, unit-norm rows.
    pub feature_texture: Array3<f64>,
    pub gt_pose: Pose3DoF,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn unit_vector(r: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..c).map(|_| normal(r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| f32_exact(x / norm)).collect();
        }
    }
}

fn height_field(geo: &Geometry, seed: u64) -> Array2<f64> {
    let n = geo.grid.n();
    let nf = n as f64;
    let mut r = rng(seed, STREAM_HEIGHT);
    let ground = DEFAULT_GROUND_ANCHOR_M;
    let mut h = Array2::from_elem((n, n), ground);
    let floor = (-BUMP_TRUNCATION * BUMP_TRUNCATION / 2.0).exp();
    for _ in 0..r.random_range(1..=MAX_BUMPS) {
        let ci = r.random_range(0.0..nf);
        let cj = r.random_range(0.0..nf);
        let sigma = r.random_range(0.04 * nf..=0.1 * nf);
        let amp = r.random_range(1.0..12.0);
        for ((i, j), v) in h.indexed_iter_mut() {
            let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
            let g = (-d2 / (2.0 * sigma * sigma)).exp();
            if g > floor {
                *v += amp * (g - floor) / (1.0 - floor);
            }
        }
    }
    let (lo, hi) = (geo.layers.z_min_m(), geo.layers.z_max_m());
    h.mapv(|v| (v.clamp(lo, hi) * HEIGHT_QUANTUM).round() / HEIGHT_QUANTUM)
}

fn sample_pose(geo: &Geometry, frame: &CrossViewFrame, mode: PoseMode, seed: u64) -> Pose3DoF {
    let mut r = rng(seed, STREAM_POSE);
    let reach = (geo.grid.n() / 4) as i64;
    let cell_px = geo.grid.spacing_m() / geo.aerial.gsd();
    let c = frame.aerial_center_px;
    match mode {
        PoseMode::GridSnapped => {
            let di = r.random_range(-reach..=reach) as f64;
            let dj = r.random_range(-reach..=reach) as f64;
            let q = r.random_range(0..4) as f64;
            Pose3DoF::new(c[0] + di * cell_px, c[1] + dj * cell_px, q * FRAC_PI_2)
        }
        PoseMode::Continuous => {
            let reach = reach as f64;
            let di = r.random_range(-reach..=reach);
            let dj = r.random_range(-reach..=reach);
            let yaw = r.random_range(-PI..PI);
            Pose3DoF::new(c[0] + di * cell_px, c[1] + dj * cell_px, yaw)
        }
    }
}

/// Builds a scene from `seed`. `noise_sigma` is stored for rendering.
pub fn generate_scene(cfg: &SceneConfig, seed: u64, noise_sigma: f64) -> Result<SyntheticScene> {
    if cfg.channels == 0 {
        return Err(Error::InvalidConfig("scene needs at least one feature channel".into()));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise sigma {noise_sigma} must be non-negative")));
    }
    let geometry = cfg.geometry.build()?;
    let frame = CrossViewFrame::new(geometry.grid, geometry.aerial, geometry.aerial.center_px());
    let n = geometry.grid.n();
    let mut tex_rng = rng(seed, STREAM_TEXTURE);
    let texture: Vec<f64> = (0..n * n)
        .flat_map(|_| unit_vector(&mut tex_rng, cfg.channels))
        .collect();
    Ok(SyntheticScene {
        config: cfg.clone(),
        geometry,
        frame,
        height_field_m: height_field(&geometry, seed),
        feature_texture: Array3::from_shape_vec((n, n, cfg.channels), texture).expect("texture size"),
        gt_pose: sample_pose(&geometry, &frame, cfg.pose_mode, seed),
        noise_sigma,
        seed,
    })
}

/// Everything the pipeline consumes, plus the matching ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedInputs {
    pub volume: FeatureVolume,
    /// Raw confidence logits `[M, N, N]`.
    pub conf_logits: Array3<f64>,
    pub aerial: BevFeatureMap,
    pub surface_gt: SurfaceMap,
    /// Ground truth surface of the aerial grid.
    pub aerial_surface_gt: SurfaceMap,
    /// Aerial pseudo-depth `[N, N]`: height above the lowest aerial cell.
    pub depth_sat: Array2<f64>,
    /// Height assigned to the lowest aerial cell.
    pub ground_anchor_m: f64,
    pub depth_scale: DepthScale,
}

pub fn render_inputs(scene: &SyntheticScene) -> Result<RenderedInputs> {
    let geo = &scene.geometry;
    let n = geo.grid.n();
    let m = geo.layers.num_layers();
    let c = scene.config.channels;
    let sigma = scene.noise_sigma;
    let layers = geo.layers;
    let surface_idx = scene.height_field_m.mapv(|h| layers.nearest_layer(h));

    let mut noise = rng(scene.seed, STREAM_GROUND_NOISE);
    let mut volume = Array4::zeros((m, n, n, c));
    for ((k, i, j, ch), v) in volume.indexed_iter_mut() {
        *v = if k == surface_idx[[i, j]] {
            scene.feature_texture[[i, j, ch]]
        } else {
            f32_exact(sigma * normal(&mut noise))
        };
    }

    let mut logit_noise = rng(scene.seed, STREAM_LOGIT_NOISE);
    let conf_logits = Array3::from_shape_fn((m, n, n), |(k, i, j)| {
        let base = if k == surface_idx[[i, j]] { PEAK_LOGIT } else { 0.0 };
        f32_exact(base + sigma * normal(&mut logit_noise))
    });

    let mut aerial_noise = rng(scene.seed, STREAM_AERIAL_NOISE);
    let mut outside = rng(scene.seed, STREAM_OUTSIDE);
    let mut aerial = Array3::zeros((n, n, c));
    let mut aerial_h = Array2::from_elem((n, n), DEFAULT_GROUND_ANCHOR_M);
    for a in 0..n * n {
        let (ai, aj) = geo.grid.cell_of_patch(a);
        let feat = match scene.frame.aerial_to_ground_patch(&scene.gt_pose, a) {
            Some(g) => {
                let (gi, gj) = geo.grid.cell_of_patch(g);
                aerial_h[[ai, aj]] = scene.height_field_m[[gi, gj]];
                (0..c)
                    .map(|ch| f32_exact(scene.feature_texture[[gi, gj, ch]] + sigma * normal(&mut aerial_noise)))
                    .collect()
            }
            None => unit_vector(&mut outside, c),
        };
        for (ch, v) in feat.into_iter().enumerate() {
            aerial[[ai, aj, ch]] = v;
        }
    }

    let anchor = aerial_h.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RenderedInputs {
        volume: FeatureVolume::new(volume, layers, geo.grid)?,
        conf_logits,
        aerial: BevFeatureMap::new(aerial, geo.grid)?,
        surface_gt: SurfaceMap::from_indices(surface_idx, &layers)?,
        aerial_surface_gt: SurfaceMap::from_indices(aerial_h.mapv(|h| layers.nearest_layer(h)), &layers)?,
        depth_sat: aerial_h.mapv(|h| h - anchor),
        ground_anchor_m: anchor,
        depth_scale: DepthScale::MetersPerUnit(1.0),
    })
}

/// Panorama depth of a flat world: the ground plane `camera_height` below
/// the camera, infinite above the horizon.
pub fn flat_world_depth(geo: &Geometry) -> Array2<f64> {
    let cam = geo.camera;
    Array2::from_shape_fn((cam.pano_h(), cam.pano_w()), |(v, u)| {
        let (_, el) = cam.pixel_to_ray(u as f64, v as f64);
        if el < 0.0 {
            f32_exact(cam.camera_height_m() / (-el).sin())
        } else {
            f64::INFINITY
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub dims: Vec<usize>,
}

/// `scene.json`: scene parameters, ground truth and the tensor listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub seed: u64,
    pub noise_sigma: f64,
    pub channels: usize,
    pub pose_mode: PoseMode,
    pub geometry: GeometryConfig,
    pub gt_pose: Pose3DoF,
    pub aerial_center_px: [f64; 2],
    pub ground_anchor_m: f64,
    pub depth_meters_per_unit: f64,
    pub tensors: BTreeMap<String, TensorEntry>,
}

pub const MANIFEST_FILE: &str = "scene.json";

impl SceneManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }

    pub fn frame(&self) -> Result<CrossViewFrame> {
        let g = self.geometry.build()?;
        Ok(CrossViewFrame::new(g.grid, g.aerial, self.aerial_center_px))
    }

    /// Loads a listed tensor and checks its dims against the listing.
    pub fn load_tensor(&self, dir: impl AsRef<Path>, name: &str) -> Result<Tensor> {
        let entry = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("scene has no tensor named {name}")))?;
        let t = Tensor::load(dir.as_ref().join(&entry.file))?;
        if t.dims() != entry.dims.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: header dims {:?}, manifest {:?}",
                t.dims(),
                entry.dims
            )));
        }
        Ok(t)
    }
}

/// Writes every scene tensor plus `scene.json` into `dir`.
pub fn write_scene_dir(dir: impl AsRef<Path>, scene: &SyntheticScene, inputs: &RenderedInputs) -> Result<SceneManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let depth_grd = flat_world_depth(&scene.geometry);
    let gt_proj = build_gt_projection(
        &depth_grd,
        &scene.geometry.camera,
        &scene.gt_pose,
        &scene.geometry.aerial,
        &ProjectionConfig::default(),
    )?;
    let tensors = [
        ("height_field", Tensor::from_array(&scene.height_field_m)),
        ("feature_texture", Tensor::from_array(&scene.feature_texture)),
        ("feature_volume", Tensor::from_array(inputs.volume.data())),
        ("conf_logits", Tensor::from_array(&inputs.conf_logits)),
        ("aerial_features", Tensor::from_array(inputs.aerial.data())),
        ("surface_gt", Tensor::from_usize_array(&inputs.surface_gt.index)),
        ("aerial_surface_gt", Tensor::from_usize_array(&inputs.aerial_surface_gt.index)),
        ("depth_sat", Tensor::from_array(&inputs.depth_sat)),
        ("depth_grd", Tensor::from_array(&depth_grd)),
        ("gt_projection", gt_proj.to_tensor()),
    ];
    let mut listing = BTreeMap::new();
    for (name, t) in &tensors {
        let file = format!("{name}.{}", crate::tensor::EXTENSION);
        t.save(dir.join(&file))?;
        listing.insert(
            (*name).to_string(),
            TensorEntry {
                file,
                dims: t.dims().to_vec(),
            },
        );
    }
    let manifest = SceneManifest {
        seed: scene.seed,
        noise_sigma: scene.noise_sigma,
        channels: scene.config.channels,
        pose_mode: scene.config.pose_mode,
        geometry: scene.config.geometry.clone(),
        gt_pose: scene.gt_pose,
        aerial_center_px: scene.frame.aerial_center_px,
        ground_anchor_m: inputs.ground_anchor_m,
        depth_meters_per_unit: 1.0,
        tensors: listing,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Pipeline inputs read back from a scene directory.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub manifest: SceneManifest,
    pub frame: CrossViewFrame,
    pub volume: FeatureVolume,
    pub conf_logits: Array3<f64>,
    pub aerial: BevFeatureMap,
}

impl LoadedScene {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = SceneManifest::load(dir)?;
        let geo = manifest.geometry.build()?;
        let frame = CrossViewFrame::new(geo.grid, geo.aerial, manifest.aerial_center_px);
        let volume = FeatureVolume::new(manifest.load_tensor(dir, "feature_volume")?.to_array()?, geo.layers, geo.grid)?;
        let conf_logits = manifest.load_tensor(dir, "conf_logits")?.to_array()?;
        let aerial = BevFeatureMap::new(manifest.load_tensor(dir, "aerial_features")?.to_array()?, geo.grid)?;
        Ok(Self {
            manifest,
            frame,
            volume,
            conf_logits,
            aerial,
        })
    }

    pub fn gt_projection(&self, dir: impl AsRef<Path>) -> Result<GroundTruthProjection> {
        GroundTruthProjection::from_tensor(&self.manifest.load_tensor(dir, "gt_projection")?)
    }
}
