//! Zero-padded "same" 3D convolution over channel-major volumes.

use super::params::Conv3dLayer;
use crate::par;

/// Spatial shape of a volume: depth, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Applies `layer` to `input` laid out as `[in_channels, d, h, w]`,
/// returning `[out_channels, d, h, w]`.
///
/// Each `(out_channel, depth)` plane is produced independently by sliding
/// whole input rows, so the inner loop runs over contiguous memory.
pub fn conv3d_same(input: &[f64], dims: Dims3, layer: &Conv3dLayer) -> Vec<f64> {
    let cin = layer.in_channels();
    let cout = layer.out_channels();
    let k = layer.kernel();
    let pad = k / 2;
    let plane = dims.h * dims.w;
    assert_eq!(input.len(), cin * dims.len(), "conv input size");

    let mut out = vec![0.0; cout * dims.len()];
    par::for_each_chunk_mut(&mut out, plane, |chunk, dst| {
        let o = chunk / dims.d;
        let d = chunk % dims.d;
        dst.fill(layer.bias[o]);
        for ci in 0..cin {
            let src_c = &input[ci * dims.len()..(ci + 1) * dims.len()];
            for kd in 0..k {
                let sd = d as isize + kd as isize - pad as isize;
                if sd < 0 || sd >= dims.d as isize {
                    continue;
                }
                let src_plane = &src_c[sd as usize * plane..(sd as usize + 1) * plane];
                for kh in 0..k {
                    for h in 0..dims.h {
                        let sh = h as isize + kh as isize - pad as isize;
                        if sh < 0 || sh >= dims.h as isize {
                            continue;
                        }
                        let src_row = &src_plane[sh as usize * dims.w..(sh as usize + 1) * dims.w];
                        let dst_row = &mut dst[h * dims.w..(h + 1) * dims.w];
                        for kw in 0..k {
                            let wt = layer.weight[[o, ci, kd, kh, kw]];
                            if wt == 0.0 {
                                continue;
                            }
                            // dst[x] += wt * src[x + kw - pad] over the valid x range.
                            let shift = kw as isize - pad as isize;
                            let (x0, x1) = if shift < 0 {
                                ((-shift) as usize, dims.w)
                            } else {
                                (0, dims.w.saturating_sub(shift as usize))
                            };
                            if x0 >= x1 {
                                continue;
                            }
                            let s0 = (x0 as isize + shift) as usize;
                            let src = &src_row[s0..s0 + (x1 - x0)];
                            for (a, b) in dst_row[x0..x1].iter_mut().zip(src) {
                                *a += wt * b;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Runs a stack of convolutions with ReLU between consecutive layers.
pub fn conv3d_stack(input: &[f64], dims: Dims3, layers: &[Conv3dLayer]) -> Vec<f64> {
    let mut x = input.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        x = conv3d_same(&x, dims, layer);
        if i + 1 < layers.len() {
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    x
}
