//! Transformer-decoder transfer module over flattened last-stage features.
//!
//! One layer, with content tokens `c` and style tokens `s`:
//!
//! ```text
//! ĉ   = MSA(LN(c)) + c
//! c̃   = MHA(Q = LN(ĉ)·W_Q, K = s·W_K, V = s·W_V) + ĉ
//! out = MLP(LN(c̃)) + c̃
//! ```
//!
//! Style tokens are projected without normalization.

use crate::attention::{attend, global_msa_maps, mlp, AttentionParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParameterStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            depth: 3,
            heads: 8,
            mlp_ratio: 4,
            ln_eps: 1e-5,
        }
    }
}

impl TransferConfig {
    pub fn desk() -> Self {
        TransferConfig {
            depth: 2,
            heads: 2,
            ..Self::default()
        }
    }
}

/// Maps recorded by one transfer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerMaps {
    /// Content self-attention `[heads, N_c, N_c]`.
    pub self_attention: Var,
    /// Content-to-style attention `[heads, N_c, N_s]`.
    pub cross_attention: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferLayer {
    prefix: String,
    dim: usize,
    cfg: TransferConfig,
}

impl TransferLayer {
    pub fn new(index: usize, dim: usize, cfg: &TransferConfig) -> Result<Self> {
        if cfg.heads == 0 || dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "transfer width {dim} is not divisible by {} heads",
                cfg.heads
            )));
        }
        Ok(TransferLayer {
            prefix: format!("transfer.layer{index}"),
            dim,
            cfg: cfg.clone(),
        })
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    fn msa(&self) -> AttentionParams {
        AttentionParams {
            prefix: self.name("msa"),
            dim: self.dim,
            heads: self.cfg.heads,
            rel_bias: None,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, init: &mut Init) -> Result<()> {
        let d = self.dim;
        let hidden = d * self.cfg.mlp_ratio;
        for ln in ["ln1", "ln2", "ln3"] {
            store.insert(self.name(&format!("{ln}.weight")), Tensor::ones(&[d]))?;
            store.insert(self.name(&format!("{ln}.bias")), Tensor::zeros(&[d]))?;
        }
        self.msa().init(store, init)?;
        store.insert(self.name("mha.q.weight"), init.linear(d, d))?;
        store.insert(self.name("mha.q.bias"), Tensor::zeros(&[d]))?;
        store.insert(self.name("mha.kv.weight"), init.linear(d, 2 * d))?;
        store.insert(self.name("mha.kv.bias"), Tensor::zeros(&[2 * d]))?;
        store.insert(self.name("mha.proj.weight"), init.linear(d, d))?;
        store.insert(self.name("mha.proj.bias"), Tensor::zeros(&[d]))?;
        store.insert(self.name("mlp.fc1.weight"), init.linear(d, hidden))?;
        store.insert(self.name("mlp.fc1.bias"), Tensor::zeros(&[hidden]))?;
        store.insert(self.name("mlp.fc2.weight"), init.linear(hidden, d))?;
        store.insert(self.name("mlp.fc2.bias"), Tensor::zeros(&[d]))?;
        Ok(())
    }

    fn ln<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, x: Var, which: &str) -> Result<Var> {
        let g = tape.param(store, &self.name(&format!("{which}.weight")))?;
        let b = tape.param(store, &self.name(&format!("{which}.bias")))?;
        tape.layer_norm(x, g, b, self.cfg.ln_eps)
    }

    fn linear<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, x: Var, leaf: &str) -> Result<Var> {
        let w = tape.param(store, &self.name(&format!("{leaf}.weight")))?;
        let b = tape.param(store, &self.name(&format!("{leaf}.bias")))?;
        tape.linear(x, w, Some(b))
    }

    /// `c [N_c, D]`, `s [N_s, D]` → `[N_c, D]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, c: Var, s: Var) -> Result<(Var, LayerMaps)> {
        let (nc, ns) = match (tape.shape(c), tape.shape(s)) {
            (&[nc, dc], &[ns, ds]) if dc == self.dim && ds == self.dim => (nc, ns),
            (a, b) => {
                return Err(Error::dim(
                    "transfer_layer",
                    format!("content {a:?} and style {b:?} for width {}", self.dim),
                ))
            }
        };
        let d = self.dim;

        let u = self.ln(tape, store, c, "ln1")?;
        let (sa, self_attention) = global_msa_maps(tape, store, u, &self.msa())?;
        let c_hat = tape.add(sa, c)?;

        let u = self.ln(tape, store, c_hat, "ln2")?;
        let q = self.linear(tape, store, u, "mha.q")?;
        let kv = self.linear(tape, store, s, "mha.kv")?;
        let k = tape.narrow_last(kv, 0, d)?;
        let v = tape.narrow_last(kv, d, d)?;
        let q = tape.reshape(q, &[1, nc, d])?;
        let k = tape.reshape(k, &[1, ns, d])?;
        let v = tape.reshape(v, &[1, ns, d])?;
        let (ctx, probs) = attend(tape, q, k, v, self.cfg.heads, None, None)?;
        let ctx = tape.reshape(ctx, &[nc, d])?;
        let cross = self.linear(tape, store, ctx, "mha.proj")?;
        let cross_attention = tape.reshape(probs, &[self.cfg.heads, nc, ns])?;
        let c_tilde = tape.add(cross, c_hat)?;

        let u = self.ln(tape, store, c_tilde, "ln3")?;
        let m = mlp(tape, store, &self.name("mlp"), u)?;
        let out = tape.add(m, c_tilde)?;
        Ok((
            out,
            LayerMaps {
                self_attention,
                cross_attention,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    layers: Vec<TransferLayer>,
}

impl Transfer {
    pub fn new(dim: usize, cfg: &TransferConfig) -> Result<Self> {
        let layers = (0..cfg.depth)
            .map(|i| TransferLayer::new(i, dim, cfg))
            .collect::<Result<_>>()?;
        Ok(Transfer { layers })
    }

    pub fn layers(&self) -> &[TransferLayer] {
        &self.layers
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, init: &mut Init) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, init))
    }

    /// Runs every layer; returns the stylized content sequence and the maps
    /// of each layer.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        content: Var,
        style: Var,
    ) -> Result<(Var, Vec<LayerMaps>)> {
        let mut x = content;
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, m) = layer.forward(tape, store, x, style)?;
            x = y;
            maps.push(m);
        }
        Ok((x, maps))
    }
}

/// `[H, W, D]` grid → `[H·W, D]` sequence, row-major.
pub fn flatten_grid<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    match *tape.shape(x) {
        [h, w, d] => tape.reshape(x, &[h * w, d]),
        ref s => Err(Error::dim("flatten_grid", format!("expected [H, W, D], got {s:?}"))),
    }
}

/// `[H·W, D]` sequence → `[D, H, W]` feature map: token `k` lands at
/// `(k / W, k % W)`.
pub fn patch_reverse<T: Real>(tape: &mut Tape<T>, seq: Var, (h, w): (usize, usize)) -> Result<Var> {
    let [n, d] = *tape.shape(seq) else {
        return Err(Error::dim("patch_reverse", format!("expected [N, D], got {:?}", tape.shape(seq))));
    };
    if n != h * w {
        return Err(Error::dim("patch_reverse", format!("{n} tokens for a {h}x{w} grid")));
    }
    let grid = tape.reshape(seq, &[h, w, d])?;
    tape.permute(grid, &[2, 0, 1])
}

/// Inverse of [`patch_reverse`].
pub fn flatten_map<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let [d, h, w] = *tape.shape(x) else {
        return Err(Error::dim("flatten_map", format!("expected [D, H, W], got {:?}", tape.shape(x))));
    };
    let grid = tape.permute(x, &[1, 2, 0])?;
    tape.reshape(grid, &[h * w, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn setup(dim: usize, heads: usize, depth: usize, seed: u64) -> (Transfer, ParameterStore<f64>) {
        let cfg = TransferConfig {
            depth,
            heads,
            ..TransferConfig::default()
        };
        let t = Transfer::new(dim, &cfg).unwrap();
        let mut store = ParameterStore::new();
        t.init(&mut store, &mut Init::new(seed)).unwrap();
        (t, store)
    }

    #[test]
    fn single_style_token_takes_all_attention() {
        let (t, store) = setup(8, 2, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let c = tape.constant(rand_t(&mut rng, &[5, 8]));
        let s = tape.constant(rand_t(&mut rng, &[1, 8]));
        let (_, maps) = t.forward(&mut tape, &store, c, s).unwrap();
        assert_eq!(tape.shape(maps[0].cross_attention), &[2, 5, 1]);
        assert!(tape.value(maps[0].cross_attention).data().iter().all(|&p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zeroed_branches_leave_residual() {
        let (t, mut store) = setup(8, 2, 2, 2);
        for (name, p) in store.iter_mut() {
            if name.contains("proj") || name.contains("fc2") {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ct = rand_t(&mut rng, &[4, 8]);
        let mut tape = Tape::new();
        let c = tape.constant(ct.clone());
        let s = tape.constant(rand_t(&mut rng, &[3, 8]));
        let (y, _) = t.forward(&mut tape, &store, c, s).unwrap();
        assert_eq!(tape.value(y), &ct);
    }

    #[test]
    fn depth_zero_is_identity_and_shape_is_kept() {
        let (t, store) = setup(8, 2, 0, 3);
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(&[4, 8]));
        let s = tape.constant(Tensor::ones(&[6, 8]));
        assert_eq!(t.forward(&mut tape, &store, c, s).unwrap().0, c);

        let (t, store) = setup(8, 2, 2, 3);
        let (y, maps) = t.forward(&mut tape, &store, c, s).unwrap();
        assert_eq!(tape.shape(y), &[4, 8]);
        assert_eq!(maps.len(), 2);
        let bad = tape.constant(Tensor::ones(&[6, 4]));
        assert!(t.forward(&mut tape, &store, c, bad).is_err());
    }

    #[test]
    fn patch_reverse_places_tokens() {
        let mut tape = Tape::<f64>::new();
        let seq = tape.constant(Tensor::from_fn(&[6, 2], |i| i as f64));
        let m = patch_reverse(&mut tape, seq, (2, 3)).unwrap();
        assert_eq!(tape.shape(m), &[2, 2, 3]);
        for k in 0..6 {
            for d in 0..2 {
                assert_eq!(tape.value(m).at(&[d, k / 3, k % 3]), (k * 2 + d) as f64);
            }
        }
        let back = flatten_map(&mut tape, m).unwrap();
        assert_eq!(tape.value(back), tape.value(seq));
        assert!(patch_reverse(&mut tape, seq, (4, 2)).is_err());
    }

    #[test]
    fn transfer_layer_gradients() {
        let (t, store) = setup(8, 2, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [rand_t(&mut rng, &[4, 8]), rand_t(&mut rng, &[4, 8])];
        let r = gradcheck::check(&store, &inputs, 1e-4, |tp, s, v| {
            let (y, _) = t.forward(tp, s, v[0], v[1])?;
            gradcheck::project(tp, y)
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
