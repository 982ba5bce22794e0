//! Hierarchical encoder: 2×2 patch embedding followed by three stages of
//! SpW blocks, with patch merging between stages.
//!
//! Each stage pads its grid (bottom/right, by reflection) to a multiple of
//! `2n`, runs its blocks and crops back. Odd grids are padded to even extents
//! before merging, so stage extents are `⌈prev/2⌉` for any input.

use std::sync::Arc;

use crate::attention::{AttentionMode, BlockConfig, Fusion, SpwBlock};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::index::Layout;
use crate::params::{Init, ParameterStore};
use crate::tensor::{Real, Tensor};

pub const STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub blocks_per_stage: [usize; STAGES],
    pub strip_widths: [usize; STAGES],
    pub heads_per_stage: [usize; STAGES],
    pub mode: AttentionMode,
    pub fusion: Fusion,
    /// Replaces the very last block with global self-attention.
    pub global_last_block: bool,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 96,
            blocks_per_stage: [2, 2, 2],
            strip_widths: [4, 4, 4],
            heads_per_stage: [3, 6, 12],
            mode: AttentionMode::StripsWindow,
            fusion: Fusion::AttnMerge,
            global_last_block: false,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            embed_dim: 16,
            strip_widths: [2, 2, 2],
            heads_per_stage: [2, 2, 2],
            ..Self::default()
        }
    }

    /// Channel width of stage `k` (0-based): `C·2^k`.
    pub fn stage_dim(&self, k: usize) -> usize {
        self.embed_dim << k
    }

    /// Channels of the final stage, `4C`.
    pub fn out_dim(&self) -> usize {
        self.stage_dim(STAGES - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        for k in 0..STAGES {
            let (c, h) = (self.stage_dim(k), self.heads_per_stage[k]);
            if h == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {c} is not divisible by {h} heads",
                    k + 1
                )));
            }
            if self.strip_widths[k] == 0 {
                return Err(Error::Config(format!("stage {} strip width must be at least 1", k + 1)));
            }
        }
        Ok(())
    }

    fn block(&self, stage: usize, index: usize) -> Result<SpwBlock> {
        let mut cfg = BlockConfig::new(self.stage_dim(stage), self.heads_per_stage[stage], self.strip_widths[stage]);
        cfg.mode = self.mode;
        cfg.fusion = self.fusion;
        cfg.ln_eps = self.ln_eps;
        if self.mode == AttentionMode::ShiftedSquare && index % 2 == 1 {
            cfg.shift = self.strip_widths[stage];
        }
        let last = stage == STAGES - 1 && index + 1 == self.blocks_per_stage[stage];
        if self.global_last_block && last {
            cfg.mode = AttentionMode::Global;
        }
        SpwBlock::new(format!("encoder.stage{}.block{index}", stage + 1), cfg)
    }
}

/// Original extents of a grid before [`pad_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadRecord {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl PadRecord {
    pub fn is_identity(&self) -> bool {
        self.height == self.padded_height && self.width == self.padded_width
    }
}

/// Reflect-pads a `[H_p, W_p, C]` grid at the bottom/right to the next
/// multiple of `multiple`.
pub fn pad_grid<T: Real>(tape: &mut Tape<T>, x: Var, multiple: usize) -> Result<(Var, PadRecord)> {
    let (_, h, w) = Layout::Hwc.dims(tape.shape(x))?;
    if multiple == 0 {
        return Err(Error::Config("padding multiple must be positive".into()));
    }
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let rec = PadRecord {
        height: h,
        width: w,
        padded_height: ph,
        padded_width: pw,
    };
    if rec.is_identity() {
        return Ok((x, rec));
    }
    if ph - h >= h || pw - w >= w {
        return Err(Error::InputTooSmall(format!(
            "a {h}x{w} patch grid cannot be reflect-padded to {ph}x{pw}"
        )));
    }
    let y = tape.reflect_pad(x, Layout::Hwc, (0, ph - h, 0, pw - w))?;
    Ok((y, rec))
}

pub fn unpad_grid<T: Real>(tape: &mut Tape<T>, x: Var, rec: &PadRecord) -> Result<Var> {
    let (_, h, w) = Layout::Hwc.dims(tape.shape(x))?;
    if (h, w) != (rec.padded_height, rec.padded_width) {
        return Err(Error::Geometry(format!(
            "grid {h}x{w} does not match pad record {}x{}",
            rec.padded_height, rec.padded_width
        )));
    }
    if rec.is_identity() {
        return Ok(x);
    }
    tape.crop(x, Layout::Hwc, (0, 0), (rec.height, rec.width))
}

/// Gather index turning a `[3, H, W]` image into `[H/2, W/2, 12]` patch
/// vectors ordered `(channel, dy, dx)`.
pub fn patch_index(channels: usize, h: usize, w: usize) -> Vec<usize> {
    let (gh, gw) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(channels * h * w);
    for y in 0..gh {
        for x in 0..gw {
            for c in 0..channels {
                for dy in 0..2 {
                    for dx in 0..2 {
                        idx.push((c * h + 2 * y + dy) * w + 2 * x + dx);
                    }
                }
            }
        }
    }
    idx
}

/// Splits `img [3, H, W]` into 2×2 patches and projects each 12-vector to `C`.
pub fn patch_embed<T: Real>(tape: &mut Tape<T>, store: &ParameterStore<T>, img: Var) -> Result<Var> {
    let (c, h, w) = Layout::Chw.dims(tape.shape(img))?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Contract(format!("patch embedding needs even extents, got {h}x{w}")));
    }
    let patches = tape.gather(img, Arc::new(patch_index(c, h, w)), &[h / 2, w / 2, 4 * c])?;
    let wt = tape.param(store, "encoder.patch_embed.weight")?;
    let b = tape.param(store, "encoder.patch_embed.bias")?;
    tape.linear(patches, wt, Some(b))
}

/// Gather index for 2×2 stride-2 merging of a `[H, W, C]` grid into
/// `[H/2, W/2, 4C]`, sub-grids ordered `(0,0), (1,0), (0,1), (1,1)` as
/// `(row, col)` offsets.
pub fn merge_index(h: usize, w: usize, c: usize) -> Vec<usize> {
    const OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for (dy, dx) in OFFSETS {
                let base = ((2 * y + dy) * w + 2 * x + dx) * c;
                idx.extend(base..base + c);
            }
        }
    }
    idx
}

/// Downsamples `[H, W, C]` to `[H/2, W/2, 2C]`.
pub fn patch_merge<T: Real>(tape: &mut Tape<T>, store: &ParameterStore<T>, x: Var, name: &str) -> Result<Var> {
    let (c, h, w) = Layout::Hwc.dims(tape.shape(x))?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Contract(format!("patch merging needs even extents, got {h}x{w}")));
    }
    let cat = tape.gather(x, Arc::new(merge_index(h, w, c)), &[h / 2, w / 2, 4 * c])?;
    let wt = tape.param(store, name)?;
    tape.linear(cat, wt, None)
}

/// Per-stage outputs, each `[H_k, W_k, C_k]` on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageFeatures {
    pub stages: [Var; STAGES],
}

impl StageFeatures {
    pub fn last(&self) -> Var {
        self.stages[STAGES - 1]
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    blocks: Vec<Vec<SpwBlock>>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..STAGES)
            .map(|k| (0..cfg.blocks_per_stage[k]).map(|i| cfg.block(k, i)).collect())
            .collect::<Result<_>>()?;
        Ok(Encoder { cfg, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, init: &mut Init) -> Result<()> {
        let c = self.cfg.embed_dim;
        store.insert("encoder.patch_embed.weight", init.linear(12, c))?;
        store.insert("encoder.patch_embed.bias", Tensor::zeros(&[c]))?;
        for (k, stage) in self.blocks.iter().enumerate() {
            if k > 0 {
                let cin = self.cfg.stage_dim(k - 1);
                store.insert(format!("encoder.merge{}.weight", k + 1), init.linear(4 * cin, 2 * cin))?;
            }
            for block in stage {
                block.init(store, init)?;
            }
        }
        Ok(())
    }

    /// Stage extents for an `h × w` image (odd images are padded to even first).
    pub fn stage_grids(h: usize, w: usize) -> [(usize, usize); STAGES] {
        let mut g = (h.div_ceil(2), w.div_ceil(2));
        let mut out = [g; STAGES];
        for slot in out.iter_mut().skip(1) {
            g = (g.0.div_ceil(2), g.1.div_ceil(2));
            *slot = g;
        }
        out
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, img: Var) -> Result<StageFeatures> {
        let mut x = patch_embed(tape, store, img)?;
        let mut stages = Vec::with_capacity(STAGES);
        for (k, blocks) in self.blocks.iter().enumerate() {
            if k > 0 {
                let (_, h, w) = Layout::Hwc.dims(tape.shape(x))?;
                let (even, _) = pad_grid_to(tape, x, h + h % 2, w + w % 2)?;
                x = patch_merge(tape, store, even, &format!("encoder.merge{}.weight", k + 1))?;
            }
            let multiple = blocks.iter().map(SpwBlock::grid_multiple).max().unwrap_or(1);
            let (mut y, rec) = pad_grid(tape, x, multiple)?;
            for block in blocks {
                y = block.forward(tape, store, y)?;
            }
            x = unpad_grid(tape, y, &rec)?;
            stages.push(x);
        }
        Ok(StageFeatures {
            stages: [stages[0], stages[1], stages[2]],
        })
    }
}

fn pad_grid_to<T: Real>(tape: &mut Tape<T>, x: Var, ph: usize, pw: usize) -> Result<(Var, PadRecord)> {
    let (_, h, w) = Layout::Hwc.dims(tape.shape(x))?;
    let rec = PadRecord {
        height: h,
        width: w,
        padded_height: ph,
        padded_width: pw,
    };
    if rec.is_identity() {
        return Ok((x, rec));
    }
    if ph - h >= h || pw - w >= w {
        return Err(Error::InputTooSmall(format!("a {h}x{w} patch grid is too small to merge")));
    }
    Ok((tape.reflect_pad(x, Layout::Hwc, (0, ph - h, 0, pw - w))?, rec))
}
