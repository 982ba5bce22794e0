//! Image folders, crops and the synthetic desk dataset.

use std::path::{Path, PathBuf};

use rand::Rng;
use s2wat::io;
use s2wat::Tensor;

use crate::failure::{Context, Failure};

/// Every `*.ppm` file directly inside `dir`, sorted by name.
pub fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::data(format!("cannot list {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Failure::data(e.to_string()))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every image of a folder; an empty folder is an error.
pub fn load_folder(dir: &Path) -> Result<Vec<Tensor<f32>>, Failure> {
    let paths = list_ppm(dir)?;
    if paths.is_empty() {
        return Err(Failure::data(format!("no .ppm images in {}", dir.display())));
    }
    paths.iter().map(|p| io::load_ppm(p).at(p)).collect()
}

/// Bilinear resampling of a `[3, H, W]` image (half-pixel centres, edge clamp).
pub fn resize_bilinear(img: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let [c, h, w] = *img.shape() else {
        panic!("resize expects [C, H, W], got {:?}", img.shape());
    };
    let d = img.data();
    let coord = |o: usize, out: usize, inp: usize| {
        let s = ((o as f32 + 0.5) * inp as f32 / out as f32 - 0.5).clamp(0.0, (inp - 1) as f32);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(inp - 1), s - i0 as f32)
    };
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (ci, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let (y0, y1, fy) = coord(y, oh, h);
        let (x0, x1, fx) = coord(x, ow, w);
        let at = |yy: usize, xx: usize| d[(ci * h + yy) * w + xx];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Random `size × size` crop; images whose shorter side is below `size` are
/// first upscaled (bilinear) so that it equals `size`.
pub fn random_crop<R: Rng>(img: &Tensor<f32>, size: usize, rng: &mut R) -> Tensor<f32> {
    let [_, h, w] = *img.shape() else {
        panic!("crop expects [C, H, W], got {:?}", img.shape());
    };
    let scaled;
    let src = if h.min(w) < size {
        let (oh, ow) = if h <= w {
            (size, (w * size).div_ceil(h))
        } else {
            ((h * size).div_ceil(w), size)
        };
        scaled = resize_bilinear(img, oh, ow);
        &scaled
    } else {
        img
    };
    let [c, h, w] = *src.shape() else { unreachable!() };
    let y0 = rng.random_range(0..=h - size);
    let x0 = rng.random_range(0..=w - size);
    let d = src.data();
    Tensor::from_fn(&[c, size, size], |i| {
        let (ci, y, x) = (i / (size * size), (i / size) % size, i % size);
        d[(ci * h + y0 + y) * w + x0 + x]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Gradient,
    Checkerboard,
    Noise,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Gradient, Pattern::Checkerboard, Pattern::Noise];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Gradient => "gradient",
            Pattern::Checkerboard => "checkerboard",
            Pattern::Noise => "noise",
        }
    }
}

/// One synthetic `[3, size, size]` image in `[0, 1]`.
pub fn synthesize<R: Rng>(pattern: Pattern, size: usize, rng: &mut R) -> Tensor<f32> {
    let mut color = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let (a, b) = (color(), color());
    let n = size * size;
    match pattern {
        Pattern::Gradient => {
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let (dy, dx) = (angle.sin(), angle.cos());
            let span = (dy.abs() + dx.abs()) * (size - 1).max(1) as f32;
            let lo = dy.min(0.0) * (size - 1) as f32 + dx.min(0.0) * (size - 1) as f32;
            Tensor::from_fn(&[3, size, size], |i| {
                let (c, y, x) = (i / n, (i / size) % size, i % size);
                let t = (y as f32 * dy + x as f32 * dx - lo) / span;
                a[c] * (1.0 - t) + b[c] * t
            })
        }
        Pattern::Checkerboard => {
            let cell = rng.random_range(2..=(size / 4).max(2));
            Tensor::from_fn(&[3, size, size], |i| {
                let (c, y, x) = (i / n, (i / size) % size, i % size);
                if (y / cell + x / cell) % 2 == 0 {
                    a[c]
                } else {
                    b[c]
                }
            })
        }
        Pattern::Noise => {
            let data: Vec<f32> = (0..3 * n).map(|_| rng.random::<f32>()).collect();
            Tensor::new(&[3, size, size], data).expect("shape matches")
        }
    }
}

/// Writes `count` content and `count` style images under `out/content` and
/// `out/style`, cycling through the patterns. Returns the files written.
pub fn generate<R: Rng>(out: &Path, count: usize, size: usize, rng: &mut R) -> Result<Vec<PathBuf>, Failure> {
    let mut written = Vec::new();
    for (split, offset) in [("content", 0), ("style", 1)] {
        let dir = out.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))?;
        for i in 0..count {
            let pattern = Pattern::ALL[(i + offset) % Pattern::ALL.len()];
            let img = synthesize(pattern, size, rng);
            let path = dir.join(format!("{split}_{i:03}_{}.ppm", pattern.name()));
            io::save_ppm(&img, &path).at(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}
