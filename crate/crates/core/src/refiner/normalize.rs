use ndarray::{s, Array2};

use super::{Dustbin, RefinerParams, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::par;

/// Matching probabilities, `n^2 x n^2`, every entry in `(0, 1)` unless a
/// score saturates.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchProbabilities {
    pub p: Array2<f64>,
}

/// `[[S, b_col], [b_row^T, b_theta]]`
pub fn dustbin_extend(s: &SimilarityMatrix, params: &RefinerParams) -> Result<Array2<f64>> {
    dustbin_extend_with(s, &params.dustbin)
}

/// [`dustbin_extend`] with explicit dustbin scores.
pub fn dustbin_extend_with(s: &SimilarityMatrix, d: &Dustbin) -> Result<Array2<f64>> {
    let p = s.patches();
    if d.b_row.len() != p || d.b_col.len() != p {
        return Err(Error::ShapeMismatch(format!(
            "dustbin sized {}/{} for {p} patches",
            d.b_row.len(),
            d.b_col.len()
        )));
    }
    let mut out = Array2::zeros((p + 1, p + 1));
    out.slice_mut(s![..p, ..p]).assign(&s.s);
    out.slice_mut(s![..p, p]).assign(&d.b_col);
    out.slice_mut(s![p, ..p]).assign(&d.b_row);
    out[[p, p]] = d.b_theta;
    Ok(out)
}

/// Softmax of every row, max-subtracted.
pub fn row_softmax(x: &Array2<f64>) -> Array2<f64> {
    let cols = x.ncols();
    let mut out = x.as_standard_layout().into_owned();
    let data = out.as_slice_mut().expect("standard layout");
    if cols == 0 {
        return out;
    }
    par::for_each_chunk_mut(data, cols, |_, row| {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    });
    out
}

/// Softmax of every column, max-subtracted. Works row by row so the
/// result stays in standard layout.
pub fn col_softmax(x: &Array2<f64>) -> Array2<f64> {
    let cols = x.ncols();
    let mut out = x.as_standard_layout().into_owned();
    if cols == 0 || x.nrows() == 0 {
        return out;
    }
    let mut mx = vec![f64::NEG_INFINITY; cols];
    for row in out.rows() {
        for (m, &v) in mx.iter_mut().zip(row) {
            *m = m.max(v);
        }
    }
    let data = out.as_slice_mut().expect("standard layout");
    par::for_each_chunk_mut(data, cols, |_, row| {
        for (v, m) in row.iter_mut().zip(&mx) {
            *v = (*v - m).exp();
        }
    });
    let mut z = vec![0.0; cols];
    for row in data.chunks(cols) {
        for (s, v) in z.iter_mut().zip(row) {
            *s += v;
        }
    }
    par::for_each_chunk_mut(data, cols, |_, row| {
        for (v, s) in row.iter_mut().zip(&z) {
            *v /= s;
        }
    });
    out
}

/// Hadamard product of the row- and column-softmaxed dustbin matrix,
/// cropped to the patch block.
pub fn normalize_doubly_stochastic(s_dustbin: &Array2<f64>) -> Result<MatchProbabilities> {
    let (r, c) = s_dustbin.dim();
    if r != c || r < 2 {
        return Err(Error::ShapeMismatch(format!(
            "dustbin matrix {:?} must be square with at least one patch",
            s_dustbin.shape()
        )));
    }
    if s_dustbin.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dustbin matrix"));
    }
    let rows = row_softmax(s_dustbin);
    let cols = col_softmax(s_dustbin);
    let p = r - 1;
    let mut out = rows.slice(s![..p, ..p]).to_owned();
    out.zip_mut_with(&cols.slice(s![..p, ..p]), |a, b| *a *= b);
    Ok(MatchProbabilities { p: out })
}
