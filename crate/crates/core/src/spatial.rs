//! Spatial ops on `[C, H, W]` maps and `[H, W, C]` patch grids.

use std::sync::Arc;

use crate::autodiff::{BinaryKind, Broadcast, Tape, Var};
use crate::error::{Error, Result};
use crate::index::{self, Layout};
use crate::tensor::Real;

impl<T: Real> Tape<T> {
    /// Mirror-without-edge reflection padding of a `[C, H, W]` map.
    pub fn reflect_pad_2d(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        self.reflect_pad(x, Layout::Chw, (top, bottom, left, right))
    }

    pub fn reflect_pad(&mut self, x: Var, layout: Layout, pads: (usize, usize, usize, usize)) -> Result<Var> {
        let (idx, shape) = index::reflect_pad(self.shape(x), layout, pads)?;
        self.gather(x, Arc::new(idx), &shape)
    }

    /// Removes `(top, bottom, left, right)` rows/columns from a `[C, H, W]` map.
    pub fn crop_2d(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let (_, h, w) = Layout::Chw.dims(self.shape(x))?;
        if top + bottom > h || left + right > w {
            return Err(Error::dim("crop_2d", "crop exceeds extents"));
        }
        self.crop(x, Layout::Chw, (top, left), (h - top - bottom, w - left - right))
    }

    pub fn crop(&mut self, x: Var, layout: Layout, origin: (usize, usize), size: (usize, usize)) -> Result<Var> {
        let (idx, shape) = index::crop(self.shape(x), layout, origin, size)?;
        self.gather(x, Arc::new(idx), &shape)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let (idx, shape) = index::upsample_nearest2(self.shape(x), Layout::Chw)?;
        self.gather(x, Arc::new(idx), &shape)
    }

    /// Valid, stride-1 cross-correlation of `x [Cin, H, W]` with
    /// `w [Cout, Cin, k, k]` plus bias `b [Cout]`.
    ///
    /// Callers reflect-pad beforehand to keep extents. Lowered to im2col and a
    /// single matrix product, so an active counter sees `Cout·Cin·k²·H'·W'`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] || sw[1] != sx[0] {
            return Err(Error::dim("conv2d", format!("input {sx:?} with kernel {sw:?}")));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::dim("conv2d", format!("bias {:?} for {} outputs", self.shape(b), sw[0])));
        }
        let k = sw[2];
        let (idx, col_shape) = index::im2col(&sx, k)?;
        let cols = self.gather(x, Arc::new(idx), &col_shape)?;
        let wm = self.reshape(w, &[sw[0], sw[1] * k * k])?;
        let y = self.matmul(wm, cols)?;
        let y = self.broadcast(y, b, BinaryKind::Add, Broadcast::Prefix)?;
        self.reshape(y, &[sw[0], sx[1] - k + 1, sx[2] - k + 1])
    }

    /// 2×2 stride-2 max pooling of a `[C, H, W]` map (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = Layout::Chw.dims(self.shape(x))?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::dim("max_pool2", format!("input {h}x{w} too small")));
        }
        let data = self.value(x).data();
        let mut idx = Vec::with_capacity(c * oh * ow);
        let mut margin = f64::INFINITY;
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = (ci * h + 2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = (ci * h + 2 * y + dy) * w + 2 * xx + dx;
                        if data[j] > data[best] {
                            best = j;
                        }
                    }
                    idx.push(best);
                    // an all-zero window behind a ReLU is flat, not a tie
                    let top = data[best].as_f64();
                    if top != 0.0 {
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let j = (ci * h + 2 * y + dy) * w + 2 * xx + dx;
                            if j != best {
                                margin = margin.min(top - data[j].as_f64());
                            }
                        }
                    }
                }
            }
        }
        self.note_kink(margin);
        self.note_pattern(idx.iter().copied());
        self.gather(x, Arc::new(idx), &[c, oh, ow])
    }
}
