//! Convolutional decoder mirroring a VGG encoder: three scales of
//! reflect-padded 3×3 conv + ReLU followed by ×2 nearest upsampling, then a
//! linear 3×3 conv to RGB.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::index::Layout;
use crate::params::{Init, ParameterStore};
use crate::tensor::{Real, Tensor};

pub const SCALES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Channels entering the decoder, `4C`.
    pub in_dim: usize,
    /// Extra channel-preserving conv + ReLU layers after each upsampling.
    pub extra_convs: [usize; SCALES],
}

impl DecoderConfig {
    pub fn new(in_dim: usize) -> Self {
        DecoderConfig {
            in_dim,
            extra_convs: [0; SCALES],
        }
    }

    /// `4C → 2C → C → C/2 → 3`.
    pub fn channels(&self) -> [usize; SCALES + 2] {
        let d = self.in_dim;
        [d, d / 2, d / 4, d / 8, 3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim < 8 || self.in_dim % 8 != 0 {
            return Err(Error::Config(format!(
                "decoder input width {} must be a positive multiple of 8",
                self.in_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    relu: bool,
    upsample: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    convs: Vec<ConvSpec>,
}

impl Decoder {
    pub fn new(cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels();
        let mut convs = Vec::new();
        for k in 0..SCALES {
            convs.push(ConvSpec {
                cin: ch[k],
                cout: ch[k + 1],
                relu: true,
                upsample: true,
            });
            for _ in 0..cfg.extra_convs[k] {
                convs.push(ConvSpec {
                    cin: ch[k + 1],
                    cout: ch[k + 1],
                    relu: true,
                    upsample: false,
                });
            }
        }
        convs.push(ConvSpec {
            cin: ch[SCALES],
            cout: 3,
            relu: false,
            upsample: false,
        });
        Ok(Decoder { convs })
    }

    pub fn num_convs(&self) -> usize {
        self.convs.len()
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, init: &mut Init) -> Result<()> {
        for (i, c) in self.convs.iter().enumerate() {
            store.insert(format!("decoder.block{i}.weight"), init.conv(c.cout, c.cin, 3))?;
            store.insert(format!("decoder.block{i}.bias"), Tensor::zeros(&[c.cout]))?;
        }
        Ok(())
    }

    /// `[4C, H/8, W/8]` → `[3, H, W]`, unclamped.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, x: Var) -> Result<Var> {
        let (c, h, w) = Layout::Chw.dims(tape.shape(x))?;
        if c != self.convs[0].cin {
            return Err(Error::dim("decoder", format!("{c} channels, expected {}", self.convs[0].cin)));
        }
        let mut y = x;
        for (i, spec) in self.convs.iter().enumerate() {
            let (_, hh, ww) = Layout::Chw.dims(tape.shape(y))?;
            y = if hh > 1 && ww > 1 {
                tape.reflect_pad_2d(y, 1, 1, 1, 1)?
            } else {
                // a single row or column has nothing to mirror
                edge_pad(tape, y)?
            };
            let wt = tape.param(store, &format!("decoder.block{i}.weight"))?;
            let b = tape.param(store, &format!("decoder.block{i}.bias"))?;
            y = tape.conv2d(y, wt, b)?;
            if spec.relu {
                y = tape.relu(y);
            }
            if spec.upsample {
                y = tape.upsample_nearest2(y)?;
            }
        }
        debug_assert_eq!(tape.shape(y), &[3, 8 * h, 8 * w]);
        Ok(y)
    }
}

/// Replicate padding by one on each side.
fn edge_pad<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (c, h, w) = Layout::Chw.dims(tape.shape(x))?;
    let (oh, ow) = (h + 2, w + 2);
    let idx: Vec<usize> = (0..c * oh * ow)
        .map(|i| {
            let (ci, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
            let sy = y.saturating_sub(1).min(h - 1);
            let sx = xx.saturating_sub(1).min(w - 1);
            (ci * h + sy) * w + sx
        })
        .collect();
    tape.gather(x, std::sync::Arc::new(idx), &[c, oh, ow])
}
