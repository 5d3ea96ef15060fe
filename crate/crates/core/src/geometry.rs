//! BEV grids, height layers, and the panorama / aerial projections.
//!
//! Frames used throughout the crate:
//!
//! * **BEV metric frame**: planar, camera-centred, meters. `x` is the camera
//!   forward axis, `y` the camera right axis. Grid cell `(i, j)` sits at
//!   `((i - c) * s, (j - c) * s)` with `c = (n - 1) / 2` and `s` the spacing.
//! * **Aerial pixel frame**: `(x_px, y_px)` pixel coordinates of the aerial
//!   image. At yaw 0 the BEV `x` axis maps onto `+x_px` and `y` onto `+y_px`;
//!   yaw rotates the BEV frame counterclockwise into the aerial frame.
//! * **Panorama**: equirectangular, `u` spans azimuth, `v` spans elevation,
//!   azimuth 0 at the image centre unless an azimuth origin is configured.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Uniform square grid of BEV sample points centred on the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGridSpec {
    n: usize,
    extent_m: f64,
}

impl BevGridSpec {
    /// Grid with an odd number of points per side so the camera sits on a
    /// grid point.
    pub fn new(n: usize, extent_m: f64) -> Result<Self> {
        if n.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "grid size {n} must be odd so the camera occupies a grid point"
            )));
        }
        Self::any_parity(n, extent_m)
    }

    /// Like [`BevGridSpec::new`] but accepts even sizes, for which the camera
    /// falls between grid points.
    pub fn any_parity(n: usize, extent_m: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidConfig(format!("grid size {n} < 2")));
        }
        if !(extent_m.is_finite() && extent_m > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "grid extent {extent_m} must be positive"
            )));
        }
        Ok(Self { n, extent_m })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn extent_m(&self) -> f64 {
        self.extent_m
    }

    pub fn num_cells(&self) -> usize {
        self.n * self.n
    }

    pub fn spacing_m(&self) -> f64 {
        self.extent_m / (self.n - 1) as f64
    }

    fn center_index(&self) -> f64 {
        (self.n - 1) as f64 / 2.0
    }

    /// Flattened patch index of cell `(i, j)`.
    pub fn patch_index(&self, i: usize, j: usize) -> usize {
        i * self.n + j
    }

    pub fn cell_of_patch(&self, patch: usize) -> (usize, usize) {
        (patch / self.n, patch % self.n)
    }

    /// Camera-relative planar coordinates of cell `(ix, iy)`.
    pub fn cell_to_metric(&self, ix: usize, iy: usize) -> Result<(f64, f64)> {
        if ix >= self.n || iy >= self.n {
            return Err(Error::IndexOutOfRange { ix, iy, n: self.n });
        }
        Ok(self.cell_to_metric_unchecked(ix, iy))
    }

    pub(crate) fn cell_to_metric_unchecked(&self, ix: usize, iy: usize) -> (f64, f64) {
        let s = self.spacing_m();
        let c = self.center_index();
        ((ix as f64 - c) * s, (iy as f64 - c) * s)
    }

    pub fn patch_to_metric(&self, patch: usize) -> (f64, f64) {
        let (i, j) = self.cell_of_patch(patch);
        self.cell_to_metric_unchecked(i, j)
    }

    /// Nearest grid cell to a metric point, `None` when it falls off the grid.
    /// Half-way points round away from the grid centre.
    pub fn nearest_cell(&self, x_m: f64, y_m: f64) -> Option<(usize, usize)> {
        let s = self.spacing_m();
        let c = self.center_index();
        let fi = (x_m / s + c).round();
        let fj = (y_m / s + c).round();
        let max = (self.n - 1) as f64;
        if !(0.0..=max).contains(&fi) || !(0.0..=max).contains(&fj) {
            return None;
        }
        Some((fi as usize, fj as usize))
    }
}

/// Free function form of [`BevGridSpec::cell_to_metric`].
pub fn bev_cell_to_metric(spec: &BevGridSpec, ix: usize, iy: usize) -> Result<(f64, f64)> {
    spec.cell_to_metric(ix, iy)
}

/// Evenly spaced height layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightLayerSpec {
    num_layers: usize,
    z_min_m: f64,
    z_max_m: f64,
}

impl HeightLayerSpec {
    pub fn new(num_layers: usize, z_min_m: f64, z_max_m: f64) -> Result<Self> {
        if num_layers < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 height layers, got {num_layers}"
            )));
        }
        if !(z_min_m.is_finite() && z_max_m.is_finite() && z_min_m < z_max_m) {
            return Err(Error::InvalidConfig(format!(
                "height range [{z_min_m}, {z_max_m}] is empty"
            )));
        }
        Ok(Self {
            num_layers,
            z_min_m,
            z_max_m,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn z_min_m(&self) -> f64 {
        self.z_min_m
    }

    pub fn z_max_m(&self) -> f64 {
        self.z_max_m
    }

    pub fn spacing_m(&self) -> f64 {
        (self.z_max_m - self.z_min_m) / (self.num_layers - 1) as f64
    }

    pub fn layer_height(&self, index: usize) -> f64 {
        if index + 1 == self.num_layers {
            return self.z_max_m;
        }
        self.z_min_m + index as f64 * self.spacing_m()
    }

    /// Nearest layer to `h_m`, clamped to the layer range. Exact ties go to
    /// the lower layer.
    pub fn nearest_layer(&self, h_m: f64) -> usize {
        let f = (h_m - self.z_min_m) / self.spacing_m();
        let idx = (f - 0.5).ceil();
        if idx <= 0.0 || idx.is_nan() {
            0
        } else {
            (idx as usize).min(self.num_layers - 1)
        }
    }
}

/// Equirectangular panorama intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pano_w: usize,
    pano_h: usize,
    camera_height_m: f64,
    azimuth_origin_rad: f64,
}

impl CameraIntrinsics {
    pub fn new(pano_w: usize, pano_h: usize, camera_height_m: f64) -> Result<Self> {
        if pano_h == 0 || pano_w != 2 * pano_h {
            return Err(Error::InvalidConfig(format!(
                "equirectangular panorama must be 2:1, got {pano_w}x{pano_h}"
            )));
        }
        if !(2.0..=3.0).contains(&camera_height_m) {
            return Err(Error::InvalidConfig(format!(
                "camera height {camera_height_m} m outside [2, 3] m"
            )));
        }
        Ok(Self {
            pano_w,
            pano_h,
            camera_height_m,
            azimuth_origin_rad: 0.0,
        })
    }

    /// Azimuth that lands on the panorama's centre column.
    pub fn with_azimuth_origin(mut self, azimuth_origin_rad: f64) -> Self {
        self.azimuth_origin_rad = azimuth_origin_rad;
        self
    }

    pub fn pano_w(&self) -> usize {
        self.pano_w
    }

    pub fn pano_h(&self) -> usize {
        self.pano_h
    }

    pub fn camera_height_m(&self) -> f64 {
        self.camera_height_m
    }

    pub fn azimuth_origin_rad(&self) -> f64 {
        self.azimuth_origin_rad
    }

    /// Azimuth and elevation of the ray through pixel `(u, v)`.
    pub fn pixel_to_ray(&self, u: f64, v: f64) -> (f64, f64) {
        let az = (u / self.pano_w as f64 - 0.5) * TAU + self.azimuth_origin_rad;
        let el = (0.5 - v / self.pano_h as f64) * PI;
        (az, el)
    }
}

/// Projects a camera-relative 3D point (height measured from the ground)
/// into the panorama. `Ok(None)` when the row falls outside `[0, H)`.
pub fn project_point_to_panorama(
    intr: &CameraIntrinsics,
    x_m: f64,
    y_m: f64,
    z_m: f64,
) -> Result<Option<(f64, f64)>> {
    let planar = x_m.hypot(y_m);
    let dz = z_m - intr.camera_height_m;
    if planar == 0.0 && dz == 0.0 {
        return Err(Error::DegeneratePoint);
    }
    let azimuth = y_m.atan2(x_m);
    let elevation = dz.atan2(planar);
    let w = intr.pano_w as f64;
    let h = intr.pano_h as f64;
    let u = (((azimuth - intr.azimuth_origin_rad) / TAU + 0.5) * w).rem_euclid(w);
    let v = (0.5 - elevation / PI) * h;
    if !(0.0..h).contains(&v) {
        return Ok(None);
    }
    Ok(Some((u, v)))
}

/// Aerial image sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AerialMeta {
    gsd_m_per_px: f64,
    image_size_px: usize,
}

impl AerialMeta {
    pub fn new(gsd_m_per_px: f64, image_size_px: usize) -> Result<Self> {
        if !(gsd_m_per_px.is_finite() && gsd_m_per_px > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "ground sampling distance {gsd_m_per_px} must be positive"
            )));
        }
        if image_size_px == 0 {
            return Err(Error::InvalidConfig("aerial image size is zero".into()));
        }
        Ok(Self {
            gsd_m_per_px,
            image_size_px,
        })
    }

    pub fn gsd(&self) -> f64 {
        self.gsd_m_per_px
    }

    pub fn image_size_px(&self) -> usize {
        self.image_size_px
    }

    pub fn center_px(&self) -> [f64; 2] {
        let c = self.image_size_px as f64 / 2.0;
        [c, c]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let s = self.image_size_px as f64;
        (0.0..s).contains(&p[0]) && (0.0..s).contains(&p[1])
    }
}

/// Planar camera pose in the aerial image: pixel translation and yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3DoF {
    pub t_px: [f64; 2],
    /// Counterclockwise, wrapped to `(-pi, pi]`.
    pub yaw_rad: f64,
}

impl Pose3DoF {
    pub fn new(tx_px: f64, ty_px: f64, yaw_rad: f64) -> Self {
        Self {
            t_px: [tx_px, ty_px],
            yaw_rad: wrap_angle(yaw_rad),
        }
    }

    pub fn identity_at(t_px: [f64; 2]) -> Self {
        Self { t_px, yaw_rad: 0.0 }
    }

    pub fn rotate(&self, p: [f64; 2]) -> [f64; 2] {
        rotate(self.yaw_rad, p)
    }
}

pub(crate) fn rotate(yaw: f64, p: [f64; 2]) -> [f64; 2] {
    let (s, c) = yaw.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Maps a BEV metric point into aerial pixels under `pose`.
pub fn metric_to_aerial_px(meta: &AerialMeta, pose: &Pose3DoF, x_m: f64, y_m: f64) -> [f64; 2] {
    let r = pose.rotate([x_m, y_m]);
    [
        pose.t_px[0] + r[0] / meta.gsd(),
        pose.t_px[1] + r[1] / meta.gsd(),
    ]
}

/// Inverse of [`metric_to_aerial_px`].
pub fn aerial_px_to_metric(meta: &AerialMeta, pose: &Pose3DoF, px: [f64; 2]) -> [f64; 2] {
    let d = [
        (px[0] - pose.t_px[0]) * meta.gsd(),
        (px[1] - pose.t_px[1]) * meta.gsd(),
    ];
    rotate(-pose.yaw_rad, d)
}

/// Aerial pixel locations of an axis-aligned BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AerialSampleGrid {
    /// Indexed by patch (`i * n + j`).
    pub coords_px: Vec<[f64; 2]>,
    pub in_bounds: Vec<bool>,
}

impl AerialSampleGrid {
    pub fn all_in_bounds(&self) -> bool {
        self.in_bounds.iter().all(|&b| b)
    }
}

/// Pixel coordinates for sampling an aerial image onto `spec`, centred at
/// `center_px`. Cells falling off the image are flagged in `in_bounds`.
pub fn aerial_bev_sample_coords(
    spec: &BevGridSpec,
    meta: &AerialMeta,
    center_px: [f64; 2],
) -> Result<AerialSampleGrid> {
    if !meta.contains(center_px) {
        return Err(Error::InvalidConfig(format!(
            "grid centre {center_px:?} outside the {0}x{0} aerial image",
            meta.image_size_px()
        )));
    }
    let coords_px: Vec<[f64; 2]> = (0..spec.num_cells())
        .map(|p| {
            let (x, y) = spec.patch_to_metric(p);
            [center_px[0] + x / meta.gsd(), center_px[1] + y / meta.gsd()]
        })
        .collect();
    let in_bounds = coords_px.iter().map(|&c| meta.contains(c)).collect();
    Ok(AerialSampleGrid {
        coords_px,
        in_bounds,
    })
}

/// A ground BEV grid paired with an axis-aligned aerial BEV grid of the same
/// spec sampled around `aerial_center_px`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossViewFrame {
    pub grid: BevGridSpec,
    pub aerial: AerialMeta,
    pub aerial_center_px: [f64; 2],
}

impl CrossViewFrame {
    pub fn new(grid: BevGridSpec, aerial: AerialMeta, aerial_center_px: [f64; 2]) -> Self {
        Self {
            grid,
            aerial,
            aerial_center_px,
        }
    }

    /// Aerial pixel position of an aerial grid patch.
    pub fn aerial_patch_px(&self, patch: usize) -> [f64; 2] {
        let (x, y) = self.grid.patch_to_metric(patch);
        [
            self.aerial_center_px[0] + x / self.aerial.gsd(),
            self.aerial_center_px[1] + y / self.aerial.gsd(),
        ]
    }

    /// Aerial patch position in meters (aerial pixels times GSD).
    pub fn aerial_patch_m(&self, patch: usize) -> [f64; 2] {
        let px = self.aerial_patch_px(patch);
        [px[0] * self.aerial.gsd(), px[1] * self.aerial.gsd()]
    }

    /// Nearest aerial patch to an aerial pixel, if on the grid.
    pub fn aerial_patch_at(&self, px: [f64; 2]) -> Option<usize> {
        let g = self.aerial.gsd();
        let (i, j) = self.grid.nearest_cell(
            (px[0] - self.aerial_center_px[0]) * g,
            (px[1] - self.aerial_center_px[1]) * g,
        )?;
        Some(self.grid.patch_index(i, j))
    }

    /// Aerial patch that ground patch `patch` lands on under `pose`.
    pub fn ground_to_aerial_patch(&self, pose: &Pose3DoF, patch: usize) -> Option<usize> {
        let (x, y) = self.grid.patch_to_metric(patch);
        self.aerial_patch_at(metric_to_aerial_px(&self.aerial, pose, x, y))
    }

    /// Ground patch that aerial patch `patch` back-projects to under `pose`.
    pub fn aerial_to_ground_patch(&self, pose: &Pose3DoF, patch: usize) -> Option<usize> {
        let m = aerial_px_to_metric(&self.aerial, pose, self.aerial_patch_px(patch));
        let (i, j) = self.grid.nearest_cell(m[0], m[1])?;
        Some(self.grid.patch_index(i, j))
    }

    /// Every `(ground_patch, aerial_patch)` pair with an on-grid target,
    /// in ground patch order.
    pub fn gt_pairs(&self, pose: &Pose3DoF) -> Vec<(usize, usize)> {
        (0..self.grid.num_cells())
            .filter_map(|p| self.ground_to_aerial_patch(pose, p).map(|a| (p, a)))
            .collect()
    }
}

fn default_aerial_size() -> usize {
    640
}

/// JSON form of the grid, layer, camera and aerial specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub n: usize,
    pub extent_m: f64,
    pub m_layers: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub gsd: f64,
    pub pano_w: usize,
    pub pano_h: usize,
    pub camera_height: f64,
    #[serde(default = "default_aerial_size")]
    pub aerial_size_px: usize,
    #[serde(default)]
    pub azimuth_origin_rad: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            n: 41,
            extent_m: 71.0,
            m_layers: 11,
            z_min: -10.0,
            z_max: 10.0,
            gsd: 0.12,
            pano_w: 1024,
            pano_h: 512,
            camera_height: 2.5,
            aerial_size_px: default_aerial_size(),
            azimuth_origin_rad: 0.0,
        }
    }
}

/// Validated set of specs built from a [`GeometryConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub grid: BevGridSpec,
    pub layers: HeightLayerSpec,
    pub camera: CameraIntrinsics,
    pub aerial: AerialMeta,
}

impl GeometryConfig {
    pub fn build(&self) -> Result<Geometry> {
        Ok(Geometry {
            grid: BevGridSpec::new(self.n, self.extent_m)?,
            layers: HeightLayerSpec::new(self.m_layers, self.z_min, self.z_max)?,
            camera: CameraIntrinsics::new(self.pano_w, self.pano_h, self.camera_height)?
                .with_azimuth_origin(self.azimuth_origin_rad),
            aerial: AerialMeta::new(self.gsd, self.aerial_size_px)?,
        })
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid41() -> BevGridSpec {
        BevGridSpec::new(41, 71.0).unwrap()
    }

    #[test]
    fn cell_to_metric_examples() {
        assert_eq!(grid41().cell_to_metric(20, 20).unwrap(), (0.0, 0.0));
        let (x, y) = grid41().cell_to_metric(40, 20).unwrap();
        assert_abs_diff_eq!(x, 35.5, epsilon = 1e-12);
        assert_eq!(y, 0.0);
        let g3 = BevGridSpec::new(3, 2.0).unwrap();
        assert_eq!(g3.cell_to_metric(0, 0).unwrap(), (-1.0, -1.0));
    }

    #[test]
    fn cell_to_metric_rejects_out_of_range() {
        assert!(matches!(
            grid41().cell_to_metric(41, 0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn grid_rejects_even_and_tiny() {
        assert!(BevGridSpec::new(40, 71.0).is_err());
        assert!(BevGridSpec::new(1, 71.0).is_err());
        assert!(BevGridSpec::new(41, 0.0).is_err());
        assert!(BevGridSpec::any_parity(2, 1.0).is_ok());
    }

    #[test]
    fn grid_is_point_symmetric() {
        let g = grid41();
        for i in 0..41 {
            for j in 0..41 {
                let (x, y) = g.cell_to_metric(i, j).unwrap();
                let (xm, ym) = g.cell_to_metric(40 - i, 40 - j).unwrap();
                assert_eq!((x, y), (-xm, -ym));
            }
        }
    }

    #[test]
    fn layer_heights_are_affine() {
        let l = HeightLayerSpec::new(11, -10.0, 10.0).unwrap();
        assert_eq!(l.layer_height(0), -10.0);
        assert_eq!(l.layer_height(10), 10.0);
        assert_eq!(l.layer_height(5), 0.0);
        for i in 0..11 {
            assert_abs_diff_eq!(l.layer_height(i), -10.0 + 2.0 * i as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn nearest_layer_ties_go_down() {
        let l = HeightLayerSpec::new(11, -10.0, 10.0).unwrap();
        assert_eq!(l.nearest_layer(-3.0), 3);
        assert_eq!(l.nearest_layer(-2.9), 4);
        assert_eq!(l.nearest_layer(-3.1), 3);
        assert_eq!(l.nearest_layer(10.0), 10);
        assert_eq!(l.nearest_layer(55.0), 10);
        assert_eq!(l.nearest_layer(-55.0), 0);
    }

    #[test]
    fn panorama_examples() {
        let intr = CameraIntrinsics::new(1024, 512, 2.5).unwrap();
        let (u, v) = project_point_to_panorama(&intr, 10.0, 0.0, 2.5).unwrap().unwrap();
        assert_abs_diff_eq!(u, 512.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 256.0, epsilon = 1e-9);
        let (u, v) = project_point_to_panorama(&intr, 0.0, -10.0, 2.5).unwrap().unwrap();
        assert_abs_diff_eq!(u, 256.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 256.0, epsilon = 1e-9);
        let (_, v) = project_point_to_panorama(&intr, 10.0, 0.0, 12.5).unwrap().unwrap();
        assert_abs_diff_eq!(v, 0.25 * 512.0, epsilon = 1e-9);
    }

    #[test]
    fn panorama_rejects_optical_center_and_nadir() {
        let intr = CameraIntrinsics::new(1024, 512, 2.5).unwrap();
        assert!(matches!(
            project_point_to_panorama(&intr, 0.0, 0.0, 2.5),
            Err(Error::DegeneratePoint)
        ));
        assert_eq!(project_point_to_panorama(&intr, 0.0, 0.0, 0.0).unwrap(), None);
    }

    #[test]
    fn panorama_azimuth_origin_shifts_columns() {
        let intr = CameraIntrinsics::new(1024, 512, 2.5)
            .unwrap()
            .with_azimuth_origin(-PI / 2.0);
        let (u, _) = project_point_to_panorama(&intr, 0.0, -10.0, 2.5).unwrap().unwrap();
        assert_abs_diff_eq!(u, 512.0, epsilon = 1e-9);
    }

    #[test]
    fn pixel_ray_inverts_projection() {
        let intr = CameraIntrinsics::new(1024, 512, 2.5).unwrap();
        let (u, v) = project_point_to_panorama(&intr, 3.0, 4.0, 1.0).unwrap().unwrap();
        let (az, el) = intr.pixel_to_ray(u, v);
        assert_abs_diff_eq!(az, 4.0f64.atan2(3.0), epsilon = 1e-12);
        assert_abs_diff_eq!(el, (-1.5f64).atan2(5.0), epsilon = 1e-12);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(1000, 512, 2.5).is_err());
        assert!(CameraIntrinsics::new(1024, 512, 3.5).is_err());
    }

    #[test]
    fn aerial_mapping_examples() {
        let meta = AerialMeta::new(0.12, 640).unwrap();
        let pose = Pose3DoF::new(320.0, 300.0, 0.0);
        let p = metric_to_aerial_px(&meta, &pose, 1.2, 0.0);
        assert_abs_diff_eq!(p[0] - 320.0, 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1] - 300.0, 0.0, epsilon = 1e-12);
        for yaw in [-3.0, -1.0, 0.4, 2.9] {
            let pose = Pose3DoF::new(11.0, 7.0, yaw);
            assert_eq!(metric_to_aerial_px(&meta, &pose, 0.0, 0.0), [11.0, 7.0]);
        }
        let a = metric_to_aerial_px(&meta, &Pose3DoF::new(0.0, 0.0, PI / 2.0), 1.0, 0.0);
        let b = metric_to_aerial_px(&meta, &Pose3DoF::new(0.0, 0.0, 0.0), 0.0, 1.0);
        assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-12);
    }

    #[test]
    fn aerial_round_trip_random() {
        let meta = AerialMeta::new(0.12, 640).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let pose = Pose3DoF::new(
                rng.random_range(0.0..640.0),
                rng.random_range(0.0..640.0),
                rng.random_range(-PI..PI),
            );
            let x = rng.random_range(-40.0..40.0);
            let y = rng.random_range(-40.0..40.0);
            let px = metric_to_aerial_px(&meta, &pose, x, y);
            let back = aerial_px_to_metric(&meta, &pose, px);
            assert!((back[0] - x).abs() < 1e-9 && (back[1] - y).abs() < 1e-9);
        }
    }

    #[test]
    fn aerial_sample_grid_examples() {
        let g = grid41();
        let meta = AerialMeta::new(0.12, 640).unwrap();
        let grid = aerial_bev_sample_coords(&g, &meta, [320.0, 320.0]).unwrap();
        let spacing = grid.coords_px[g.patch_index(21, 20)][0] - grid.coords_px[g.patch_index(20, 20)][0];
        assert_abs_diff_eq!(spacing, 1.775 / 0.12, epsilon = 1e-9);
        assert!((spacing - 14.79).abs() < 0.01);
        assert_eq!(grid.coords_px[g.patch_index(20, 20)], [320.0, 320.0]);
        assert!(grid.all_in_bounds());

        let g2 = BevGridSpec::any_parity(2, 0.12).unwrap();
        let grid = aerial_bev_sample_coords(&g2, &meta, [10.0, 10.0]).unwrap();
        assert_abs_diff_eq!(grid.coords_px[1][1] - grid.coords_px[0][1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grid.coords_px[2][0] - grid.coords_px[0][0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn aerial_sample_grid_flags_out_of_image_cells() {
        let meta = AerialMeta::new(0.12, 640).unwrap();
        let grid = aerial_bev_sample_coords(&grid41(), &meta, [10.0, 10.0]).unwrap();
        assert!(!grid.in_bounds[0]);
        assert!(grid.in_bounds[grid41().patch_index(40, 40)]);
        assert!(aerial_bev_sample_coords(&grid41(), &meta, [-1.0, 10.0]).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let text = r#"{"n":41,"extent_m":71.0,"m_layers":11,"z_min":-10.0,"z_max":10.0,
            "gsd":0.12,"pano_w":1024,"pano_h":512,"camera_height":2.5}"#;
        let cfg = GeometryConfig::from_json(text).unwrap();
        assert_eq!(cfg, GeometryConfig::default());
        let again: GeometryConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert!(cfg.build().is_ok());
    }

    proptest! {
        #[test]
        fn azimuth_wraps(x in -50.0f64..50.0, y in -50.0f64..50.0, z in -5.0f64..5.0) {
            prop_assume!(x.hypot(y) > 1e-3);
            let intr = CameraIntrinsics::new(1024, 512, 2.5).unwrap();
            let a = project_point_to_panorama(&intr, x, y, z).unwrap();
            let r = x.hypot(y);
            let az = y.atan2(x) + TAU;
            let b = project_point_to_panorama(&intr, r * az.cos(), r * az.sin(), z).unwrap();
            match (a, b) {
                (Some((ua, va)), Some((ub, vb))) => {
                    let du = (ua - ub).abs();
                    prop_assert!(du.min(1024.0 - du) < 1e-6);
                    prop_assert!((va - vb).abs() < 1e-6);
                }
                (None, None) => {}
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn wrap_angle_range(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI && w <= PI);
            prop_assert!(((a - w) / TAU - ((a - w) / TAU).round()).abs() < 1e-9);
        }
    }
}
