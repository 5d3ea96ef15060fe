//! Patch similarity, dual-branch residual refinement, dustbin extension and
//! row/column softmax normalization.
//!
//! The similarity matrix has one row per ground patch and one column per
//! aerial patch, both in patch order (`i * n + j`). The local branch views
//! it as an `n x n x n^2` cube indexed by ground cell and aerial patch.

mod conv;
mod matches;
mod normalize;
mod params;

use ndarray::{concatenate, s, Array1, Array2, Axis};

pub use conv::{conv3d_same, conv3d_stack, Dims3};
pub use matches::{extract_matches, Match, MatchRule};
pub use normalize::{
    col_softmax, dustbin_extend, dustbin_extend_with, normalize_doubly_stochastic, row_softmax, MatchProbabilities,
};
pub use params::{Conv3dLayer, Dense, Dustbin, Mlp, RefinerConfig, RefinerParams};

use crate::error::{Error, Result};
use crate::par;
use crate::surface::BevFeatureMap;

/// Temperature used when none is configured.
pub const DEFAULT_TAU: f64 = 0.1;

const ROW_BLOCK: usize = 64;

/// Scaled patch similarities, `n^2 x n^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub s: Array2<f64>,
    pub tau: f64,
}

impl SimilarityMatrix {
    pub fn new(s: Array2<f64>, tau: f64) -> Result<Self> {
        if s.nrows() != s.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "similarity matrix {:?} is not square",
                s.shape()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("similarity matrix"));
        }
        Ok(Self { s, tau })
    }

    pub fn patches(&self) -> usize {
        self.s.nrows()
    }

    /// Grid side length, if the patch count is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        let p = self.patches();
        let n = (p as f64).sqrt().round() as usize;
        (n * n == p).then_some(n)
    }
}

fn l2_normalized_rows(f: &Array2<f64>, side: &'static str) -> Result<Array2<f64>> {
    let mut out = f.clone();
    for (row, mut r) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = r.dot(&r).sqrt();
        if norm.is_nan() || norm <= 0.0 {
            return Err(Error::ZeroNormFeature { side, row });
        }
        r.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Applies `f` to row blocks of `x` in parallel and stacks the results.
fn map_row_blocks<F>(x: &Array2<f64>, f: F) -> Array2<f64>
where
    F: Fn(ndarray::ArrayView2<'_, f64>) -> Array2<f64> + Sync + Send,
{
    let rows = x.nrows();
    let blocks = rows.div_ceil(ROW_BLOCK).max(1);
    let parts = par::map_range(blocks, |b| {
        let r0 = b * ROW_BLOCK;
        let r1 = (r0 + ROW_BLOCK).min(rows);
        f(x.slice(s![r0..r1, ..]))
    });
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("row blocks share a width")
}

/// Cosine similarity between every ground and aerial patch, divided by `tau`.
pub fn initial_similarity(
    f_grd: &BevFeatureMap,
    f_sat: &BevFeatureMap,
    tau: f64,
) -> Result<SimilarityMatrix> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature {tau} must be positive")));
    }
    if f_grd.data().dim() != f_sat.data().dim() {
        return Err(Error::ShapeMismatch(format!(
            "ground features {:?} vs aerial features {:?}",
            f_grd.data().shape(),
            f_sat.data().shape()
        )));
    }
    let g = l2_normalized_rows(&f_grd.flattened(), "ground")?;
    let a = l2_normalized_rows(&f_sat.flattened(), "aerial")?;
    let at = a.t();
    let s = map_row_blocks(&g, |rows| rows.dot(&at).mapv(|c| c.clamp(-1.0, 1.0) / tau));
    SimilarityMatrix::new(s, tau)
}

fn check_patches(s: &SimilarityMatrix, params: &RefinerParams) -> Result<usize> {
    let n = s.grid_side().ok_or_else(|| {
        Error::ShapeMismatch(format!("{} patches do not form a square grid", s.patches()))
    })?;
    params.validate(s.patches())?;
    Ok(n)
}

/// Spatial residual from the 3D convolution stack over the similarity cube.
pub fn local_residual(s: &SimilarityMatrix, params: &RefinerParams) -> Result<Array2<f64>> {
    let n = check_patches(s, params)?;
    let p = s.patches();
    let dims = Dims3 { d: n, h: n, w: p };
    let input: Vec<f64> = s.s.iter().copied().collect();
    let out = conv3d_stack(&input, dims, &params.local);
    Ok(Array2::from_shape_vec((p, p), out).expect("conv output size"))
}

fn mlp_forward(x: ndarray::ArrayView2<'_, f64>, mlp: &Mlp) -> Array2<f64> {
    let mut h = x.to_owned();
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = h.dot(&layer.weight.t()) + &layer.bias;
        if i + 1 < mlp.layers.len() {
            h.mapv_inplace(|v| v.max(0.0));
        }
    }
    h
}

/// Row-wise MLP residual; every row is transformed independently.
pub fn global_residual(s: &SimilarityMatrix, params: &RefinerParams) -> Result<Array2<f64>> {
    check_patches(s, params)?;
    Ok(map_row_blocks(&s.s, |rows| mlp_forward(rows, &params.global)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-ground-patch gate in `[0, 1]`, computed from the patch's own row.
pub fn gate_values(s: &SimilarityMatrix, params: &RefinerParams) -> Result<Array1<f64>> {
    check_patches(s, params)?;
    let logits = map_row_blocks(&s.s, |rows| mlp_forward(rows, &params.gate));
    Ok(logits.column(0).mapv(sigmoid))
}

/// `S + alpha * (local + global)`, with alpha broadcast along each row.
pub fn refine(s: &SimilarityMatrix, params: &RefinerParams) -> Result<SimilarityMatrix> {
    let alpha = gate_values(s, params)?;
    let local = local_residual(s, params)?;
    let global = global_residual(s, params)?;
    let mut out = s.s.clone();
    for (((mut row, a), l), g) in out
        .axis_iter_mut(Axis(0))
        .zip(alpha.iter())
        .zip(local.axis_iter(Axis(0)))
        .zip(global.axis_iter(Axis(0)))
    {
        for ((v, dl), dg) in row.iter_mut().zip(l.iter()).zip(g.iter()) {
            *v += a * (dl + dg);
        }
    }
    SimilarityMatrix::new(out, s.tau)
}
