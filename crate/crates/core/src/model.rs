//! Full style-transfer network: shared encoder, transfer module, decoder.

use crate::decoder::{Decoder, DecoderConfig, SCALES};
use crate::encoder::{Encoder, EncoderConfig, StageFeatures};
use crate::error::{Error, Result};
use crate::autodiff::{Tape, Var};
use crate::index::Layout;
use crate::params::{Init, ParameterStore};
use crate::tensor::Real;
use crate::transfer::{flatten_grid, patch_reverse, LayerMaps, Transfer, TransferConfig};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub transfer: TransferConfig,
    pub decoder_extra_convs: [usize; SCALES],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            transfer: TransferConfig::default(),
            decoder_extra_convs: [0; SCALES],
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            transfer: TransferConfig::desk(),
            decoder_extra_convs: [0; SCALES],
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            in_dim: self.encoder.out_dim(),
            extra_convs: self.decoder_extra_convs,
        }
    }
}

/// Everything recorded by one stylization pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `[3, H, W]` with the content image's extents.
    pub image: Var,
    pub content: StageFeatures,
    pub style: StageFeatures,
    /// Stylized last-stage sequence `[N_c, 4C]`.
    pub transferred: Var,
    pub maps: Vec<LayerMaps>,
}

#[derive(Debug, Clone)]
pub struct S2wat {
    cfg: ModelConfig,
    encoder: Encoder,
    transfer: Transfer,
    decoder: Decoder,
}

impl S2wat {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let transfer = Transfer::new(cfg.encoder.out_dim(), &cfg.transfer)?;
        let decoder = Decoder::new(&cfg.decoder())?;
        Ok(S2wat {
            cfg,
            encoder,
            transfer,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn transfer(&self) -> &Transfer {
        &self.transfer
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Freshly initialised parameters; identical for identical seeds.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        let mut init = Init::new(seed);
        self.encoder.init(&mut store, &mut init)?;
        self.transfer.init(&mut store, &mut init)?;
        self.decoder.init(&mut store, &mut init)?;
        Ok(store)
    }

    /// Encodes an even-sized `[3, H, W]` image.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, img: Var) -> Result<StageFeatures> {
        self.encoder.forward(tape, store, img)
    }

    /// Transfer + decode from already encoded features.
    pub fn render<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        content: &StageFeatures,
        style: &StageFeatures,
    ) -> Result<(Var, Var, Vec<LayerMaps>)> {
        let (_, h, w) = Layout::Hwc.dims(tape.shape(content.last()))?;
        let c = flatten_grid(tape, content.last())?;
        let s = flatten_grid(tape, style.last())?;
        let (cs, maps) = self.transfer.forward(tape, store, c, s)?;
        let fmap = patch_reverse(tape, cs, (h, w))?;
        let img = self.decoder.forward(tape, store, fmap)?;
        Ok((img, cs, maps))
    }

    /// Stylizes `content` with `style` (both `[3, H, W]`, any extents of at
    /// least [`MIN_SIDE`]); the result has the content image's extents.
    pub fn stylize<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, content: Var, style: Var) -> Result<Var> {
        Ok(self.trace(tape, store, content, style)?.image)
    }

    pub fn trace<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, content: Var, style: Var) -> Result<Trace> {
        let (c_even, (h, w)) = pad_even(tape, content)?;
        let (s_even, _) = pad_even(tape, style)?;
        let fc = self.encode(tape, store, c_even)?;
        let fs = self.encode(tape, store, s_even)?;
        let (img, transferred, maps) = self.render(tape, store, &fc, &fs)?;
        let (_, oh, ow) = Layout::Chw.dims(tape.shape(img))?;
        let image = if (oh, ow) == (h, w) {
            img
        } else {
            tape.crop(img, Layout::Chw, (0, 0), (h, w))?
        };
        Ok(Trace {
            image,
            content: fc,
            style: fs,
            transferred,
            maps,
        })
    }
}

/// Reflect-pads an image bottom/right to even extents; returns the original extents.
fn pad_even<T: Real>(tape: &mut Tape<T>, img: Var) -> Result<(Var, (usize, usize))> {
    let (c, h, w) = Layout::Chw.dims(tape.shape(img))?;
    if c != 3 {
        return Err(Error::dim("stylize", format!("expected an RGB image, got {c} channels")));
    }
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::InputTooSmall(format!("{h}x{w} image, minimum is {MIN_SIDE}x{MIN_SIDE}")));
    }
    if h % 2 == 0 && w % 2 == 0 {
        return Ok((img, (h, w)));
    }
    Ok((tape.reflect_pad_2d(img, 0, h % 2, 0, w % 2)?, (h, w)))
}
