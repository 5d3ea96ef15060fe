//! Visible-surface estimation from per-voxel height confidences.
//!
//! Confidences are accumulated bottom-up along each vertical column; the
//! surface is the first layer whose cumulative mass strictly exceeds the
//! threshold. Height-wise features are then fused around that layer.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, HeightLayerSpec};
use crate::par;

/// Threshold used when none is configured.
pub const DEFAULT_SURFACE_THRESHOLD: f64 = 0.5;

/// Ground-view volumetric BEV tensor, shape `[M, N, N, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    data: Array4<f64>,
    layers: HeightLayerSpec,
    grid: BevGridSpec,
}

impl FeatureVolume {
    pub fn new(data: Array4<f64>, layers: HeightLayerSpec, grid: BevGridSpec) -> Result<Self> {
        let (m, n1, n2, _) = data.dim();
        if m != layers.num_layers() || n1 != grid.n() || n2 != grid.n() {
            return Err(Error::ShapeMismatch(format!(
                "feature volume {:?} vs {} layers on a {}x{} grid",
                data.shape(),
                layers.num_layers(),
                grid.n(),
                grid.n()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature volume"));
        }
        Ok(Self { data, layers, grid })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn layers(&self) -> &HeightLayerSpec {
        &self.layers
    }

    pub fn grid(&self) -> &BevGridSpec {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }
}

/// Per-voxel surface confidence, normalized along the height axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVolume {
    conf: Array3<f64>,
    layers: HeightLayerSpec,
}

impl ConfidenceVolume {
    /// Wraps already-normalized confidences. Columns must be non-negative and
    /// sum to one within `1e-6`.
    pub fn from_normalized(conf: Array3<f64>, layers: HeightLayerSpec) -> Result<Self> {
        if conf.dim().0 != layers.num_layers() {
            return Err(Error::ShapeMismatch(format!(
                "{} confidence layers vs {} height layers",
                conf.dim().0,
                layers.num_layers()
            )));
        }
        let (_, n1, n2) = conf.dim();
        for i in 0..n1 {
            for j in 0..n2 {
                let col = conf.slice(ndarray::s![.., i, j]);
                if col.iter().any(|&c| !(c.is_finite() && c >= 0.0)) {
                    return Err(Error::NonFinite("confidence column"));
                }
                let sum: f64 = col.sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidConfig(format!(
                        "confidence column ({i}, {j}) sums to {sum}"
                    )));
                }
            }
        }
        Ok(Self { conf, layers })
    }

    pub fn conf(&self) -> &Array3<f64> {
        &self.conf
    }

    pub fn layers(&self) -> &HeightLayerSpec {
        &self.layers
    }

    fn column(&self, i: usize, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.conf.dim().0).map(move |k| self.conf[[k, i, j]])
    }
}

/// Chosen surface layer per BEV cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMap {
    pub index: Array2<usize>,
    pub height_m: Array2<f64>,
}

impl SurfaceMap {
    pub fn from_indices(index: Array2<usize>, layers: &HeightLayerSpec) -> Result<Self> {
        if let Some(&bad) = index.iter().find(|&&k| k >= layers.num_layers()) {
            return Err(Error::InvalidConfig(format!(
                "surface index {bad} >= {} layers",
                layers.num_layers()
            )));
        }
        let height_m = index.mapv(|k| layers.layer_height(k));
        Ok(Self { index, height_m })
    }

    pub fn n(&self) -> usize {
        self.index.dim().0
    }
}

/// Ground or aerial BEV feature grid, shape `[N, N, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    data: Array3<f64>,
    grid: BevGridSpec,
}

impl BevFeatureMap {
    pub fn new(data: Array3<f64>, grid: BevGridSpec) -> Result<Self> {
        let (n1, n2, c) = data.dim();
        if n1 != grid.n() || n2 != grid.n() || c == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map {:?} on a {}x{} grid",
                data.shape(),
                grid.n(),
                grid.n()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("BEV feature map"));
        }
        Ok(Self { data, grid })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn grid(&self) -> &BevGridSpec {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Features flattened to `[N*N, c]`, rows in patch order.
    pub fn flattened(&self) -> Array2<f64> {
        let (n1, n2, c) = self.data.dim();
        self.data
            .to_owned()
            .into_shape_with_order((n1 * n2, c))
            .expect("contiguous feature map")
    }
}

/// Softmax over the height axis of raw `[M, N, N]` logits.
pub fn normalize_confidence(raw: &Array3<f64>, layers: &HeightLayerSpec) -> Result<ConfidenceVolume> {
    let (m, n1, n2) = raw.dim();
    if m != layers.num_layers() {
        return Err(Error::ShapeMismatch(format!(
            "{m} logit layers vs {} height layers",
            layers.num_layers()
        )));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("confidence logits"));
    }
    let columns = par::map_range(n1 * n2, |cell| {
        let (i, j) = (cell / n2, cell % n2);
        let mx = (0..m).map(|k| raw[[k, i, j]]).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..m).map(|k| (raw[[k, i, j]] - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<_>>()
    });
    let mut conf = Array3::zeros((m, n1, n2));
    for (cell, col) in columns.into_iter().enumerate() {
        let (i, j) = (cell / n2, cell % n2);
        for (k, v) in col.into_iter().enumerate() {
            conf[[k, i, j]] = v;
        }
    }
    Ok(ConfidenceVolume {
        conf,
        layers: *layers,
    })
}

/// First layer whose bottom-up cumulative confidence strictly exceeds
/// `threshold` (top layer if it never does).
pub fn surface_index_of_column(column: impl IntoIterator<Item = f64>, threshold: f64) -> Option<usize> {
    let mut acc = 0.0;
    let mut last = None;
    for (k, c) in column.into_iter().enumerate() {
        acc += c;
        if acc > threshold {
            return Some(k);
        }
        last = Some(k);
    }
    last
}

/// Thresholded bottom-up accumulation over every cell.
pub fn surface_from_accumulation(conf: &ConfidenceVolume, threshold: f64) -> Result<SurfaceMap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::ThresholdOutOfRange(threshold));
    }
    let (m, n1, n2) = conf.conf.dim();
    let idx = par::map_range(n1 * n2, |cell| {
        surface_index_of_column(conf.column(cell / n2, cell % n2), threshold).unwrap_or(m - 1)
    });
    let index = Array2::from_shape_vec((n1, n2), idx).expect("cell count");
    SurfaceMap::from_indices(index, &conf.layers)
}

/// Affine map from `C` input channels to `c` output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    /// `[c, C]`
    pub weight: Array2<f64>,
    /// `[c]`
    pub bias: Array1<f64>,
}

impl ProjectionHead {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.dim().0 != bias.len() {
            return Err(Error::ShapeMismatch(format!(
                "projection weight {:?} vs bias {}",
                weight.shape(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }
}

/// How height-wise features are combined.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusionConfig {
    /// Layers on each side of the surface index that take part; `None`
    /// means every layer.
    pub window: Option<usize>,
    /// Desired output channels; `None` keeps the head's width (or `C`).
    pub out_channels: Option<usize>,
}

/// Confidence-weighted fusion of the layers around each cell's surface,
/// followed by the projection head.
pub fn fuse_height_features(
    vol: &FeatureVolume,
    conf: &ConfidenceVolume,
    surf: &SurfaceMap,
    cfg: &FusionConfig,
    head: Option<&ProjectionHead>,
) -> Result<BevFeatureMap> {
    let (m, n, _, c_in) = vol.data.dim();
    if conf.conf.dim() != (m, n, n) {
        return Err(Error::ShapeMismatch(format!(
            "confidence {:?} vs volume {:?}",
            conf.conf.shape(),
            vol.data.shape()
        )));
    }
    if surf.index.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "surface map {:?} vs {n}x{n} grid",
            surf.index.shape()
        )));
    }
    let c_out = match (head, cfg.out_channels) {
        (Some(h), want) => {
            if h.in_channels() != c_in {
                return Err(Error::ShapeMismatch(format!(
                    "projection expects {} channels, volume has {c_in}",
                    h.in_channels()
                )));
            }
            if let Some(w) = want.filter(|&w| w != h.out_channels()) {
                return Err(Error::ShapeMismatch(format!(
                    "projection yields {} channels, {w} requested",
                    h.out_channels()
                )));
            }
            h.out_channels()
        }
        (None, Some(w)) if w != c_in => {
            return Err(Error::MissingProjection { from: c_in, to: w });
        }
        (None, _) => c_in,
    };
    let window = cfg.window.unwrap_or(m);

    let cells = par::map_range(n * n, |cell| {
        let (i, j) = (cell / n, cell % n);
        let s = surf.index[[i, j]];
        let lo = s.saturating_sub(window);
        let hi = (s + window).min(m - 1);
        let total: f64 = (lo..=hi).map(|k| conf.conf[[k, i, j]]).sum();
        let span = (hi - lo + 1) as f64;
        let mut fused = vec![0.0; c_in];
        for k in lo..=hi {
            let w = if total > 0.0 {
                conf.conf[[k, i, j]] / total
            } else {
                1.0 / span
            };
            for (ch, f) in fused.iter_mut().enumerate() {
                *f += w * vol.data[[k, i, j, ch]];
            }
        }
        match head {
            None => fused,
            Some(h) => (0..c_out)
                .map(|o| {
                    h.bias[o]
                        + h.weight
                            .row(o)
                            .iter()
                            .zip(&fused)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect(),
        }
    });
    let flat: Vec<f64> = cells.into_iter().flatten().collect();
    let data = Array3::from_shape_vec((n, n, c_out), flat).expect("fused shape");
    BevFeatureMap::new(data, vol.grid)
}

/// Maps aerial depth values to meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthScale {
    /// Scale chosen so the largest depth lands on this height (meters).
    MaxTo(f64),
    /// Fixed meters per depth unit.
    MetersPerUnit(f64),
}

impl Default for DepthScale {
    fn default() -> Self {
        DepthScale::MaxTo(10.0)
    }
}

/// Pseudo-height supervision derived from an aerial depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct AerialHeightIndex {
    pub surface: SurfaceMap,
    /// Set when the depth map was constant; every cell is then at the anchor.
    pub zero_range: bool,
}

/// Default height assigned to the aerial depth minimum.
pub const DEFAULT_GROUND_ANCHOR_M: f64 = -3.0;

/// Anchors the depth minimum at `ground_anchor_m`, scales the rest linearly
/// to meters, and snaps to the nearest layer (ties to the lower one).
pub fn aerial_depth_to_height_index(
    depth: &Array2<f64>,
    layers: &HeightLayerSpec,
    ground_anchor_m: f64,
    scale: DepthScale,
) -> Result<AerialHeightIndex> {
    if depth.is_empty() {
        return Err(Error::Empty("depth map"));
    }
    if depth.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("aerial depth"));
    }
    let min = depth.iter().copied().fold(f64::INFINITY, f64::min);
    let max = depth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let zero_range = range == 0.0;
    let k = match scale {
        _ if zero_range => 0.0,
        DepthScale::MaxTo(top) => (top - ground_anchor_m) / range,
        DepthScale::MetersPerUnit(s) => s,
    };
    let index = depth.mapv(|d| layers.nearest_layer(ground_anchor_m + k * (d - min)));
    Ok(AerialHeightIndex {
        surface: SurfaceMap::from_indices(index, layers)?,
        zero_range,
    })
}

/// Bottom-up cumulative sums along the height axis, `[M, N, N]`.
pub fn cumulative_confidence(conf: &ConfidenceVolume) -> Array3<f64> {
    let mut out = conf.conf.clone();
    out.accumulate_axis_inplace(Axis(0), |&prev, cur| *cur += prev);
    out
}
