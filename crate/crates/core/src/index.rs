//! Gather-index builders for layout ops.
//!
//! Each builder returns `(index, shape)` such that `out[i] = in[index[i]]`.

use crate::error::{Error, Result};
use crate::tensor::{numel, strides};

/// Memory layout of a rank-3 spatial tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `[channels, height, width]` (images, conv feature maps).
    Chw,
    /// `[height, width, channels]` (patch grids).
    Hwc,
}

impl Layout {
    /// `(channels, height, width)` of a rank-3 shape.
    pub fn dims(self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() != 3 {
            return Err(Error::dim("spatial", format!("expected rank 3, got {shape:?}")));
        }
        Ok(match self {
            Layout::Chw => (shape[0], shape[1], shape[2]),
            Layout::Hwc => (shape[2], shape[0], shape[1]),
        })
    }

    pub fn shape(self, c: usize, h: usize, w: usize) -> Vec<usize> {
        match self {
            Layout::Chw => vec![c, h, w],
            Layout::Hwc => vec![h, w, c],
        }
    }

    pub fn offset(self, (_, h, w): (usize, usize, usize), c_total: usize, ci: usize, y: usize, x: usize) -> usize {
        match self {
            Layout::Chw => (ci * h + y) * w + x,
            Layout::Hwc => (y * w + x) * c_total + ci,
        }
    }
}

/// Builds an index over every output position of a rank-3 spatial tensor.
fn spatial_map(
    layout: Layout,
    in_dims: (usize, usize, usize),
    out_h: usize,
    out_w: usize,
    mut src: impl FnMut(usize, usize) -> (usize, usize),
) -> (Vec<usize>, Vec<usize>) {
    let (c, _, _) = in_dims;
    let out_shape = layout.shape(c, out_h, out_w);
    let mut index = vec![0; c * out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sy, sx) = src(y, x);
            for ci in 0..c {
                let o = layout.offset((c, out_h, out_w), c, ci, y, x);
                index[o] = layout.offset(in_dims, c, ci, sy, sx);
            }
        }
    }
    (index, out_shape)
}

pub fn permute(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let r = shape.len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim("permute", format!("{perm:?} is not a permutation of rank {r}")));
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = numel(shape);
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; r];
    for _ in 0..n {
        index.push(
            counter
                .iter()
                .zip(perm)
                .map(|(&c, &p)| c * in_strides[p])
                .sum(),
        );
        for ax in (0..r).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Ok((index, out_shape))
}

/// Mirror-without-edge reflection of coordinate `j` into `[0, n)`.
fn reflect(j: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if j < 0 {
        -j
    } else if j >= n {
        2 * (n - 1) - j
    } else {
        j
    };
    r as usize
}

/// Reflection padding of the two spatial axes: `(top, bottom, left, right)`.
pub fn reflect_pad(
    shape: &[usize],
    layout: Layout,
    (top, bottom, left, right): (usize, usize, usize, usize),
) -> Result<(Vec<usize>, Vec<usize>)> {
    let dims @ (_, h, w) = layout.dims(shape)?;
    for (pad, extent) in [(top, h), (bottom, h), (left, w), (right, w)] {
        if pad > 0 && pad >= extent {
            return Err(Error::UnsupportedPadding { pad, extent });
        }
    }
    Ok(spatial_map(layout, dims, h + top + bottom, w + left + right, |y, x| {
        (
            reflect(y as isize - top as isize, h),
            reflect(x as isize - left as isize, w),
        )
    }))
}

/// Crops a `height × width` region starting at `(y0, x0)`.
pub fn crop(
    shape: &[usize],
    layout: Layout,
    (y0, x0): (usize, usize),
    (height, width): (usize, usize),
) -> Result<(Vec<usize>, Vec<usize>)> {
    let dims @ (_, h, w) = layout.dims(shape)?;
    if y0 + height > h || x0 + width > w {
        return Err(Error::dim(
            "crop",
            format!("region {height}x{width} at ({y0},{x0}) exceeds {h}x{w}"),
        ));
    }
    Ok(spatial_map(layout, dims, height, width, |y, x| (y0 + y, x0 + x)))
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_nearest2(shape: &[usize], layout: Layout) -> Result<(Vec<usize>, Vec<usize>)> {
    let dims @ (_, h, w) = layout.dims(shape)?;
    Ok(spatial_map(layout, dims, 2 * h, 2 * w, |y, x| (y / 2, x / 2)))
}

/// im2col for a valid `k × k`, stride-1 correlation of a `[C, H, W]` map.
/// The result is `[C·k·k, H'·W']` with rows ordered `(c, ky, kx)`.
pub fn im2col(shape: &[usize], k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (c, h, w) = Layout::Chw.dims(shape)?;
    if k > h || k > w {
        return Err(Error::dim("conv2d", format!("kernel {k} larger than input {h}x{w}")));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut index = Vec::with_capacity(c * k * k * oh * ow);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                for y in 0..oh {
                    for x in 0..ow {
                        index.push((ci * h + y + ky) * w + x + kx);
                    }
                }
            }
        }
    }
    Ok((index, vec![c * k * k, oh * ow]))
}

/// Inverse of a gather index that is a permutation.
pub fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (i, &j) in index.iter().enumerate() {
        inv[j] = i;
    }
    inv
}
