//! Window attention over patch grids, Attn Merge fusion and the
//! strips-window (SpW) attention block.
//!
//! Patch grids are `[H_p, W_p, C]` tensors. A block attends within three
//! window families over the same normalised input: horizontal strips
//! `n × W_p`, vertical strips `H_p × n` and square `2n × 2n` windows (the only
//! family that carries a relative position bias). The three results are
//! fused with the input by Attn Merge: per token, each candidate is weighted
//! by its dot product with the input token and the weighted candidates are
//! summed.

use std::sync::Arc;

use crate::autodiff::{BinaryKind, Broadcast, Tape, Var};
use crate::error::{Error, Result};
use crate::index;
use crate::params::{Init, ParameterStore};
use crate::tensor::{Real, Tensor};

/// Logit offset for token pairs that a shifted-window mask separates.
const MASK_LOGIT: f64 = -100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WindowKind {
    Horizontal,
    Vertical,
    Square,
}

/// One windowing scheme over a concrete patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    kind: WindowKind,
    window: (usize, usize),
    grid: (usize, usize),
}

impl WindowGeometry {
    /// `n × W_p` strips.
    pub fn horizontal(n: usize, grid: (usize, usize)) -> Result<Self> {
        Self::build(WindowKind::Horizontal, (n, grid.1), grid)
    }

    /// `H_p × n` strips.
    pub fn vertical(n: usize, grid: (usize, usize)) -> Result<Self> {
        Self::build(WindowKind::Vertical, (grid.0, n), grid)
    }

    /// Square `2n × 2n` windows for strip width `n`.
    pub fn square(n: usize, grid: (usize, usize)) -> Result<Self> {
        Self::square_window(2 * n, grid)
    }

    /// Square `m × m` windows.
    pub fn square_window(m: usize, grid: (usize, usize)) -> Result<Self> {
        Self::build(WindowKind::Square, (m, m), grid)
    }

    fn build(kind: WindowKind, window: (usize, usize), grid: (usize, usize)) -> Result<Self> {
        if window.0 == 0 || window.1 == 0 || grid.0 == 0 || grid.1 == 0 {
            return Err(Error::Geometry(format!("empty window {window:?} or grid {grid:?}")));
        }
        if grid.0 % window.0 != 0 || grid.1 % window.1 != 0 {
            return Err(Error::Geometry(format!(
                "{kind:?} window {}x{} does not tile a {}x{} grid",
                window.0, window.1, grid.0, grid.1
            )));
        }
        Ok(WindowGeometry { kind, window, grid })
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    /// Window extents `(rows, cols)` in patches.
    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn num_windows(&self) -> usize {
        (self.grid.0 / self.window.0) * (self.grid.1 / self.window.1)
    }

    /// Tokens per window.
    pub fn window_len(&self) -> usize {
        self.window.0 * self.window.1
    }

    /// Gather index taking `[H_p, W_p, C]` to `[num_windows, window_len, C]`.
    /// Windows are enumerated row-major over the window grid and tokens
    /// row-major within each window.
    pub fn partition_index(&self, channels: usize) -> Vec<usize> {
        let (gh, gw) = self.grid;
        let (wh, ww) = self.window;
        let mut idx = Vec::with_capacity(gh * gw * channels);
        for wy in 0..gh / wh {
            for wx in 0..gw / ww {
                for ty in 0..wh {
                    for tx in 0..ww {
                        let base = ((wy * wh + ty) * gw + wx * ww + tx) * channels;
                        idx.extend(base..base + channels);
                    }
                }
            }
        }
        idx
    }

    /// Window id of every grid token, row-major over the grid.
    pub fn window_of_token(&self) -> Vec<usize> {
        let (gh, gw) = self.grid;
        let (wh, ww) = self.window;
        (0..gh * gw)
            .map(|t| (t / gw / wh) * (gw / ww) + (t % gw) / ww)
            .collect()
    }
}

pub fn window_partition<T: Real>(tape: &mut Tape<T>, x: Var, g: &WindowGeometry) -> Result<Var> {
    let c = grid_channels(tape, x, g)?;
    let idx = g.partition_index(c);
    tape.gather(x, Arc::new(idx), &[g.num_windows(), g.window_len(), c])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<T: Real>(tape: &mut Tape<T>, w: Var, g: &WindowGeometry) -> Result<Var> {
    let s = tape.shape(w).to_vec();
    if s.len() != 3 || s[0] != g.num_windows() || s[1] != g.window_len() {
        return Err(Error::Geometry(format!(
            "windows {s:?} do not match {} windows of {} tokens",
            g.num_windows(),
            g.window_len()
        )));
    }
    let idx = index::invert(&g.partition_index(s[2]));
    tape.gather(w, Arc::new(idx), &[g.grid.0, g.grid.1, s[2]])
}

fn grid_channels<T: Real>(tape: &Tape<T>, x: Var, g: &WindowGeometry) -> Result<usize> {
    match *tape.shape(x) {
        [h, w, c] if (h, w) == g.grid => Ok(c),
        ref s => Err(Error::Geometry(format!("input {s:?} does not match grid {:?}", g.grid))),
    }
}

/// Relative position bias lookup for `m × m` windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelPosBias {
    window: usize,
    index: Vec<usize>,
}

impl RelPosBias {
    pub fn new(window: usize) -> Self {
        let m = window as isize;
        let side = 2 * m - 1;
        let l = window * window;
        let mut index = Vec::with_capacity(l * l);
        for i in 0..l as isize {
            for j in 0..l as isize {
                let dy = i / m - j / m + m - 1;
                let dx = i % m - j % m + m - 1;
                index.push((dy * side + dx) as usize);
            }
        }
        RelPosBias { window, index }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Rows of the learnable table, `(2m − 1)²`.
    pub fn table_len(&self) -> usize {
        (2 * self.window - 1).pow(2)
    }

    /// `[m², m²]` bucket lookup, row-major.
    pub fn index(&self) -> &[usize] {
        &self.index
    }

    /// Expands a `[(2m−1)², heads]` table into a `[heads, m², m²]` bias.
    pub fn bias<T: Real>(&self, tape: &mut Tape<T>, table: Var) -> Result<Var> {
        let s = tape.shape(table).to_vec();
        if s.len() != 2 || s[0] != self.table_len() {
            return Err(Error::Config(format!(
                "bias table {s:?} does not fit window {}",
                self.window
            )));
        }
        let heads = s[1];
        let l = self.window * self.window;
        let idx: Vec<usize> = (0..heads)
            .flat_map(|h| self.index.iter().map(move |&b| b * heads + h))
            .collect();
        tape.gather(table, Arc::new(idx), &[heads, l, l])
    }
}

/// Projection weights of one multi-head self-attention module, stored under
/// `{prefix}.qkv.{weight,bias}`, `{prefix}.proj.{weight,bias}` and, when a
/// relative position bias is used, `{prefix}.rel_bias`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    /// Square window size `M` whose bias table this module owns.
    pub rel_bias: Option<usize>,
}

impl AttentionParams {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, rel_bias: Option<usize>) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        Ok(AttentionParams {
            prefix: prefix.into(),
            dim,
            heads,
            rel_bias,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, init: &mut Init) -> Result<()> {
        let c = self.dim;
        store.insert(self.name("qkv.weight"), init.linear(c, 3 * c))?;
        store.insert(self.name("qkv.bias"), Tensor::zeros(&[3 * c]))?;
        store.insert(self.name("proj.weight"), init.linear(c, c))?;
        store.insert(self.name("proj.bias"), Tensor::zeros(&[c]))?;
        if let Some(m) = self.rel_bias {
            let rows = RelPosBias::new(m).table_len();
            store.insert(self.name("rel_bias"), init.trunc_normal(&[rows, self.heads], 0.02))?;
        }
        Ok(())
    }

    /// Projects `[..., C]` tokens to `(q, k, v)`.
    fn qkv<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, x: Var) -> Result<(Var, Var, Var)> {
        let w = tape.param(store, &self.name("qkv.weight"))?;
        let b = tape.param(store, &self.name("qkv.bias"))?;
        let qkv = tape.linear(x, w, Some(b))?;
        let c = self.dim;
        Ok((
            tape.narrow_last(qkv, 0, c)?,
            tape.narrow_last(qkv, c, c)?,
            tape.narrow_last(qkv, 2 * c, c)?,
        ))
    }

    fn project<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.name("proj.weight"))?;
        let b = tape.param(store, &self.name("proj.bias"))?;
        tape.linear(x, w, Some(b))
    }
}

/// `[B, L, C]` → `[B·h, L, C/h]`
fn split_heads<T: Real>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let [b, l, c] = *tape.shape(x) else {
        return Err(Error::dim("split_heads", format!("{:?}", tape.shape(x))));
    };
    let x = tape.reshape(x, &[b, l, heads, c / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, l, c / heads])
}

/// `[B·h, L, d]` → `[B, L, h·d]`
fn merge_heads<T: Real>(tape: &mut Tape<T>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let [_, l, d] = *tape.shape(x) else {
        return Err(Error::dim("merge_heads", format!("{:?}", tape.shape(x))));
    };
    let x = tape.reshape(x, &[batch, heads, l, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch, l, heads * d])
}

/// Scaled dot-product attention on already projected `[B, L, C]` operands.
///
/// `bias` is `[h, Lq, Lk]` (shared across the batch), `mask` is a constant
/// `[B, h, Lq, Lk]`. Returns the merged context `[B, Lq, C]` and the
/// attention probabilities `[B, h, Lq, Lk]`.
pub fn attend<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<Var>,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let [batch, lq, c] = *tape.shape(q) else {
        return Err(Error::dim("attention", format!("query {:?}", tape.shape(q))));
    };
    let lk = tape.shape(k)[1];
    if tape.shape(k) != tape.shape(v) || tape.shape(k)[2] != c || tape.shape(k)[0] != batch {
        return Err(Error::dim(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", tape.shape(q), tape.shape(k), tape.shape(v)),
        ));
    }
    let d = c / heads;
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let kt = tape.transpose_last(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, T::one() / T::c(d as f64).sqrt());
    let mut scores = tape.reshape(scores, &[batch, heads, lq, lk])?;
    if let Some(b) = bias {
        scores = tape.broadcast(scores, b, BinaryKind::Add, Broadcast::Suffix)?;
    }
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let probs = tape.softmax_lastdim(scores)?;
    let flat = tape.reshape(probs, &[batch * heads, lq, lk])?;
    let ctx = tape.matmul(flat, vh)?;
    let ctx = merge_heads(tape, ctx, batch, heads)?;
    Ok((ctx, probs))
}

/// Multi-head self-attention inside each window of `g`:
/// `softmax(QKᵀ/√d + B)V` per window and head, heads concatenated, then
/// the output projection. `B` is present exactly when `p` owns a bias table,
/// which is only allowed for square windows of the matching size.
pub fn window_attention<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    x: Var,
    g: &WindowGeometry,
    p: &AttentionParams,
) -> Result<Var> {
    Ok(window_attention_maps(tape, store, x, g, p, 0)?.0)
}

/// [`window_attention`] with an optional cyclic shift (shifted-window
/// variant with the usual region mask) that also returns the attention
/// probabilities `[num_windows, heads, L, L]`.
pub fn window_attention_maps<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    x: Var,
    g: &WindowGeometry,
    p: &AttentionParams,
    shift: usize,
) -> Result<(Var, Var)> {
    let c = grid_channels(tape, x, g)?;
    if c != p.dim {
        return Err(Error::dim("window_attention", format!("{c} channels for a {}-dim module", p.dim)));
    }
    if let Some(m) = p.rel_bias {
        if g.kind != WindowKind::Square {
            return Err(Error::Config(format!(
                "relative position bias supplied for a {:?} strip window",
                g.kind
            )));
        }
        if g.window != (m, m) {
            return Err(Error::Config(format!(
                "bias table for {m}x{m} windows used with {:?} windows",
                g.window
            )));
        }
    }
    if shift > 0 && g.kind != WindowKind::Square {
        return Err(Error::Config("only square windows can be shifted".into()));
    }

    let x = if shift > 0 { roll(tape, x, g.grid, shift, false)? } else { x };
    let windows = window_partition(tape, x, g)?;
    let (q, k, v) = p.qkv(tape, store, windows)?;
    let bias = match p.rel_bias {
        Some(m) => {
            let table = tape.param(store, &p.name("rel_bias"))?;
            Some(RelPosBias::new(m).bias(tape, table)?)
        }
        None => None,
    };
    let mask = if shift > 0 {
        Some(shift_mask(tape, g, shift, p.heads))
    } else {
        None
    };
    let (ctx, probs) = attend(tape, q, k, v, p.heads, bias, mask)?;
    let out = p.project(tape, store, ctx)?;
    let out = window_reverse(tape, out, g)?;
    let out = if shift > 0 { roll(tape, out, g.grid, shift, true)? } else { out };
    Ok((out, probs))
}

/// Cyclic shift of a `[H, W, C]` grid by `-shift` (or back, when `inverse`).
fn roll<T: Real>(tape: &mut Tape<T>, x: Var, (h, w): (usize, usize), shift: usize, inverse: bool) -> Result<Var> {
    let c = tape.shape(x)[2];
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for xx in 0..w {
            let (sy, sx) = if inverse {
                ((y + h - shift % h) % h, (xx + w - shift % w) % w)
            } else {
                ((y + shift) % h, (xx + shift) % w)
            };
            let base = (sy * w + sx) * c;
            idx.extend(base..base + c);
        }
    }
    tape.gather(x, Arc::new(idx), &[h, w, c])
}

/// Region mask for shifted square windows: tokens that were not neighbours
/// before the cyclic shift may not attend to each other.
fn shift_mask<T: Real>(tape: &mut Tape<T>, g: &WindowGeometry, shift: usize, heads: usize) -> Var {
    let (gh, gw) = g.grid;
    let m = g.window.0;
    let region = |v: usize, n: usize| {
        if v < n - m {
            0
        } else if v < n - shift {
            1
        } else {
            2
        }
    };
    let labels: Vec<usize> = (0..gh * gw)
        .map(|t| region(t / gw, gh) * 3 + region(t % gw, gw))
        .collect();
    let win: Vec<usize> = g.partition_index(1).iter().map(|&i| labels[i]).collect();
    let (nw, l) = (g.num_windows(), g.window_len());
    let mask = Tensor::from_fn(&[nw, heads, l, l], |flat| {
        let w = flat / (heads * l * l);
        let i = (flat / l) % l;
        let j = flat % l;
        if win[w * l + i] == win[w * l + j] {
            T::zero()
        } else {
            T::c(MASK_LOGIT)
        }
    });
    tape.constant(mask)
}

/// Full self-attention over all tokens of `x [N, C]`.
pub fn global_msa<T: Real>(tape: &mut Tape<T>, store: &ParameterStore<T>, x: Var, p: &AttentionParams) -> Result<Var> {
    Ok(global_msa_maps(tape, store, x, p)?.0)
}

/// [`global_msa`] that also returns the attention probabilities `[h, N, N]`.
pub fn global_msa_maps<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    x: Var,
    p: &AttentionParams,
) -> Result<(Var, Var)> {
    let [n, c] = *tape.shape(x) else {
        return Err(Error::dim("global_msa", format!("expected [N, C], got {:?}", tape.shape(x))));
    };
    if c != p.dim {
        return Err(Error::dim("global_msa", format!("{c} channels for a {}-dim module", p.dim)));
    }
    let x3 = tape.reshape(x, &[1, n, c])?;
    let (q, k, v) = p.qkv(tape, store, x3)?;
    let (ctx, probs) = attend(tape, q, k, v, p.heads, None, None)?;
    let out = p.project(tape, store, ctx)?;
    let out = tape.reshape(out, &[n, c])?;
    let probs = tape.reshape(probs, &[p.heads, n, n])?;
    Ok((out, probs))
}

/// Attn Merge of `x` with candidates `a, b, c`, all `[n, d]`.
///
/// With `Y = stack(x, a, b, c)` per token, `z = x·Yᵀ·Y`: each of the four
/// candidates is weighted by its raw dot product with `x`. With `normalize`
/// the four weights are softmax-normalised first.
pub fn attn_merge<T: Real>(tape: &mut Tape<T>, x: Var, a: Var, b: Var, c: Var, normalize: bool) -> Result<Var> {
    let [n, d] = *tape.shape(x) else {
        return Err(Error::dim("attn_merge", format!("expected [n, d], got {:?}", tape.shape(x))));
    };
    let stacked = tape.stack(&[x, a, b, c])?;
    let y = tape.permute(stacked, &[1, 0, 2])?;
    let yt = tape.transpose_last(y)?;
    let xq = tape.reshape(x, &[n, 1, d])?;
    let mut w = tape.matmul(xq, yt)?;
    if normalize {
        w = tape.softmax_lastdim(w)?;
    }
    let z = tape.matmul(w, y)?;
    tape.reshape(z, &[n, d])
}

/// Attention used inside an encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// Horizontal, vertical and square windows fused together.
    StripsWindow,
    /// Square `2n × 2n` windows only.
    Square,
    /// Square windows, cyclically shifted by `n` on odd blocks.
    ShiftedSquare,
    Horizontal,
    Vertical,
    Global,
}

/// How the strips-window branches are combined with the block input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fusion {
    AttnMerge,
    AttnMergeSoftmax,
    Sum,
    /// Channel concatenation followed by a `4C → C` projection.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub strip_width: usize,
    pub mode: AttentionMode,
    pub fusion: Fusion,
    /// Cyclic shift applied to square windows (0 disables it).
    pub shift: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl BlockConfig {
    pub fn new(dim: usize, heads: usize, strip_width: usize) -> Self {
        BlockConfig {
            dim,
            heads,
            strip_width,
            mode: AttentionMode::StripsWindow,
            fusion: Fusion::AttnMerge,
            shift: 0,
            mlp_ratio: 4,
            ln_eps: 1e-5,
        }
    }
}

/// Pre-norm transformer block with strips-window attention:
///
/// ```text
/// u  = LN(z)
/// z̃  = AttnMerge(u, W-MSA_{n×W}(u), W-MSA_{H×n}(u), W-MSA_{2n×2n}(u)) + z
/// z' = MLP(LN(z̃)) + z̃
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SpwBlock {
    prefix: String,
    cfg: BlockConfig,
}

impl SpwBlock {
    pub fn new(prefix: impl Into<String>, cfg: BlockConfig) -> Result<Self> {
        if cfg.strip_width == 0 {
            return Err(Error::Config("strip width must be at least 1".into()));
        }
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", cfg.dim, cfg.heads)));
        }
        Ok(SpwBlock {
            prefix: prefix.into(),
            cfg,
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    /// Grid extents must be multiples of this for the block to apply.
    pub fn grid_multiple(&self) -> usize {
        match self.cfg.mode {
            AttentionMode::Global => 1,
            AttentionMode::Horizontal | AttentionMode::Vertical => self.cfg.strip_width,
            _ => 2 * self.cfg.strip_width,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// Attention modules of this block with their window families.
    pub fn branches(&self) -> Result<Vec<(AttentionParams, Option<WindowKind>)>> {
        let (c, h, n) = (self.cfg.dim, self.cfg.heads, self.cfg.strip_width);
        let square_bias = Some(2 * n);
        let mk = |leaf: &str, bias| AttentionParams::new(self.name(leaf), c, h, bias);
        Ok(match self.cfg.mode {
            AttentionMode::StripsWindow => vec![
                (mk("horizontal", None)?, Some(WindowKind::Horizontal)),
                (mk("vertical", None)?, Some(WindowKind::Vertical)),
                (mk("square", square_bias)?, Some(WindowKind::Square)),
            ],
            AttentionMode::Square | AttentionMode::ShiftedSquare => {
                vec![(mk("attn", square_bias)?, Some(WindowKind::Square))]
            }
            AttentionMode::Horizontal => vec![(mk("attn", None)?, Some(WindowKind::Horizontal))],
            AttentionMode::Vertical => vec![(mk("attn", None)?, Some(WindowKind::Vertical))],
            AttentionMode::Global => vec![(mk("attn", None)?, None)],
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, init: &mut Init) -> Result<()> {
        let c = self.cfg.dim;
        let hidden = c * self.cfg.mlp_ratio;
        store.insert(self.name("norm1.weight"), Tensor::ones(&[c]))?;
        store.insert(self.name("norm1.bias"), Tensor::zeros(&[c]))?;
        for (p, _) in self.branches()? {
            p.init(store, init)?;
        }
        if self.cfg.mode == AttentionMode::StripsWindow && self.cfg.fusion == Fusion::Concat {
            store.insert(self.name("fuse.weight"), init.linear(4 * c, c))?;
            store.insert(self.name("fuse.bias"), Tensor::zeros(&[c]))?;
        }
        store.insert(self.name("norm2.weight"), Tensor::ones(&[c]))?;
        store.insert(self.name("norm2.bias"), Tensor::zeros(&[c]))?;
        store.insert(self.name("mlp.fc1.weight"), init.linear(c, hidden))?;
        store.insert(self.name("mlp.fc1.bias"), Tensor::zeros(&[hidden]))?;
        store.insert(self.name("mlp.fc2.weight"), init.linear(hidden, c))?;
        store.insert(self.name("mlp.fc2.bias"), Tensor::zeros(&[c]))?;
        Ok(())
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, z: Var) -> Result<Var> {
        let [hp, wp, c] = *tape.shape(z) else {
            return Err(Error::dim("spw_block", format!("expected [H, W, C], got {:?}", tape.shape(z))));
        };
        if c != self.cfg.dim {
            return Err(Error::dim("spw_block", format!("{c} channels for a {}-dim block", self.cfg.dim)));
        }
        let grid = (hp, wp);
        let n = self.cfg.strip_width;
        let u = self.norm(tape, store, z, "norm1")?;

        let mixed = self.attention(tape, store, u, grid, n)?;
        let z_mid = tape.add(mixed, z)?;

        let u2 = self.norm(tape, store, z_mid, "norm2")?;
        let mlp = self.mlp(tape, store, u2)?;
        tape.add(mlp, z_mid)
    }

    /// Token mixing phase (attention and fusion), without the residual.
    pub fn attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        u: Var,
        grid: (usize, usize),
        n: usize,
    ) -> Result<Var> {
        let c = self.cfg.dim;
        let tokens = grid.0 * grid.1;
        let mut outs = Vec::new();
        for (p, kind) in self.branches()? {
            let out = match kind {
                Some(WindowKind::Horizontal) => {
                    window_attention(tape, store, u, &WindowGeometry::horizontal(n, grid)?, &p)?
                }
                Some(WindowKind::Vertical) => {
                    window_attention(tape, store, u, &WindowGeometry::vertical(n, grid)?, &p)?
                }
                Some(WindowKind::Square) => {
                    let shift = match self.cfg.mode {
                        AttentionMode::ShiftedSquare => self.cfg.shift,
                        _ => 0,
                    };
                    window_attention_maps(tape, store, u, &WindowGeometry::square(n, grid)?, &p, shift)?.0
                }
                None => {
                    let flat = tape.reshape(u, &[tokens, c])?;
                    let y = global_msa(tape, store, flat, &p)?;
                    tape.reshape(y, &[grid.0, grid.1, c])?
                }
            };
            outs.push(out);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }

        let flat_u = tape.reshape(u, &[tokens, c])?;
        let flat: Vec<Var> = outs
            .iter()
            .map(|&o| tape.reshape(o, &[tokens, c]))
            .collect::<Result<_>>()?;
        let fused = match self.cfg.fusion {
            Fusion::AttnMerge | Fusion::AttnMergeSoftmax => attn_merge(
                tape,
                flat_u,
                flat[0],
                flat[1],
                flat[2],
                self.cfg.fusion == Fusion::AttnMergeSoftmax,
            )?,
            Fusion::Sum => {
                let s = tape.add(flat_u, flat[0])?;
                let s = tape.add(s, flat[1])?;
                tape.add(s, flat[2])?
            }
            Fusion::Concat => {
                let s = tape.stack(&[flat_u, flat[0], flat[1], flat[2]])?;
                let s = tape.permute(s, &[1, 0, 2])?;
                let s = tape.reshape(s, &[tokens, 4 * c])?;
                let w = tape.param(store, &self.name("fuse.weight"))?;
                let b = tape.param(store, &self.name("fuse.bias"))?;
                tape.linear(s, w, Some(b))?
            }
        };
        tape.reshape(fused, &[grid.0, grid.1, c])
    }

    fn norm<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, x: Var, which: &str) -> Result<Var> {
        let g = tape.param(store, &self.name(&format!("{which}.weight")))?;
        let b = tape.param(store, &self.name(&format!("{which}.bias")))?;
        tape.layer_norm(x, g, b, self.cfg.ln_eps)
    }

    fn mlp<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        mlp(tape, store, &self.name("mlp"), x)
    }
}

/// Two-layer perceptron `fc2(GELU(fc1(x)))` stored under `{prefix}.fc{1,2}`.
pub fn mlp<T: Real>(tape: &mut Tape<T>, store: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = tape.param(store, &format!("{prefix}.fc1.weight"))?;
    let b1 = tape.param(store, &format!("{prefix}.fc1.bias"))?;
    let w2 = tape.param(store, &format!("{prefix}.fc2.weight"))?;
    let b2 = tape.param(store, &format!("{prefix}.fc2.bias"))?;
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.gelu(h);
    tape.linear(h, w2, Some(b2))
}
