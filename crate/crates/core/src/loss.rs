//! Perceptual content/style losses, identity losses and their weighted sum.
//!
//! Every distance is a mean squared error over the compared tensors.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{BinaryKind, Broadcast, Tape, Var};
use crate::error::{Error, Result};
use crate::index::Layout;
use crate::params::{Init, ParameterStore};
use crate::tensor::{Real, Tensor};

/// Added to variances before the square root.
pub const NORM_EPS: f64 = 1e-5;

/// Smallest image side the extractor accepts (four poolings before relu5_1).
pub const MIN_EXTRACT_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tap {
    Relu1_1,
    Relu2_1,
    Relu3_1,
    Relu4_1,
    Relu5_1,
}

impl Tap {
    pub const ALL: [Tap; 5] = [Tap::Relu1_1, Tap::Relu2_1, Tap::Relu3_1, Tap::Relu4_1, Tap::Relu5_1];
    pub const CONTENT: [Tap; 2] = [Tap::Relu4_1, Tap::Relu5_1];
    pub const STYLE: [Tap; 4] = [Tap::Relu2_1, Tap::Relu3_1, Tap::Relu4_1, Tap::Relu5_1];

    /// Block index 0..5.
    pub fn block(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"][self.block()]
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tap::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTap(s.to_string()))
    }
}

/// Frozen VGG-shaped feature network: five conv blocks with 2×2 max pooling
/// between them; tap `reluK_1` follows the first conv of block `K`.
///
/// Parameters are named `vgg.block{k}.conv{i}.{weight,bias}`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T: Real> {
    store: ParameterStore<T>,
    convs_per_block: [usize; 5],
}

impl<T: Real> FeatureExtractor<T> {
    pub const SURROGATE_CHANNELS: [usize; 5] = [8, 16, 32, 64, 64];

    /// Fixed-seed random network with one conv per block.
    pub fn surrogate(seed: u64) -> Self {
        let mut init = Init::new(seed);
        let mut store = ParameterStore::new();
        let mut cin = 3;
        for (k, &cout) in Self::SURROGATE_CHANNELS.iter().enumerate() {
            store
                .insert(format!("vgg.block{k}.conv0.weight"), init.conv(cout, cin, 3))
                .expect("fresh names");
            store
                .insert(format!("vgg.block{k}.conv0.bias"), Tensor::zeros(&[cout]))
                .expect("fresh names");
            cin = cout;
        }
        store.set_trainable(false);
        FeatureExtractor {
            store,
            convs_per_block: [1; 5],
        }
    }

    /// Uses externally supplied weights, e.g. converted VGG19 layers in the
    /// layout `[2, 2, 4, 4, 1]`.
    pub fn from_store(mut store: ParameterStore<T>, convs_per_block: [usize; 5]) -> Result<Self> {
        for (k, &n) in convs_per_block.iter().enumerate() {
            if n == 0 {
                return Err(Error::Config(format!("extractor block {k} has no convolutions")));
            }
            for i in 0..n {
                for leaf in ["weight", "bias"] {
                    let name = format!("vgg.block{k}.conv{i}.{leaf}");
                    if !store.contains(&name) {
                        return Err(Error::UnknownParameter(name));
                    }
                }
            }
        }
        store.set_trainable(false);
        Ok(FeatureExtractor { store, convs_per_block })
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    /// Returns the requested taps of `img [3, H, W]`, in the order asked.
    pub fn extract(&self, tape: &mut Tape<T>, img: Var, taps: &[Tap]) -> Result<Vec<Var>> {
        let (_, h, w) = Layout::Chw.dims(tape.shape(img))?;
        if h < MIN_EXTRACT_SIDE || w < MIN_EXTRACT_SIDE {
            return Err(Error::InputTooSmall(format!(
                "feature extraction needs at least {MIN_EXTRACT_SIDE}x{MIN_EXTRACT_SIDE}, got {h}x{w}"
            )));
        }
        let deepest = taps.iter().map(|t| t.block()).max().unwrap_or(0);
        let mut found = [None; 5];
        let mut x = img;
        for k in 0..=deepest {
            if k > 0 {
                x = tape.max_pool2(x)?;
            }
            let convs = if k == deepest { 1 } else { self.convs_per_block[k] };
            for i in 0..convs {
                let p = tape.reflect_pad_2d(x, 1, 1, 1, 1)?;
                let wt = tape.param(&self.store, &format!("vgg.block{k}.conv{i}.weight"))?;
                let b = tape.param(&self.store, &format!("vgg.block{k}.conv{i}.bias"))?;
                let y = tape.conv2d(p, wt, b)?;
                x = tape.relu(y);
                if i == 0 {
                    found[k] = Some(x);
                }
            }
        }
        Ok(taps.iter().map(|t| found[t.block()].expect("tap computed")).collect())
    }
}

/// Per-channel spatial mean and std (`√(var + ε)`, population variance) of
/// `f [C, H, W]`, each `[C]`.
pub fn mean_std<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<(Var, Var)> {
    let (c, h, w) = Layout::Chw.dims(tape.shape(f))?;
    let flat = tape.reshape(f, &[c, h * w])?;
    let mu = tape.mean_lastdim(flat)?;
    let centered = center(tape, flat, mu)?;
    let sq = tape.square(centered);
    let var = tape.mean_lastdim(sq)?;
    let var = tape.add_scalar(var, T::c(NORM_EPS));
    Ok((mu, tape.sqrt(var)))
}

fn center<T: Real>(tape: &mut Tape<T>, flat: Var, mu: Var) -> Result<Var> {
    let neg = tape.scale(mu, -T::one());
    tape.broadcast(flat, neg, BinaryKind::Add, Broadcast::Prefix)
}

/// Mean-variance normalization per channel; returns `[C, H·W]`.
pub fn normalize<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    let (c, h, w) = Layout::Chw.dims(tape.shape(f))?;
    let (mu, sigma) = mean_std(tape, f)?;
    let flat = tape.reshape(f, &[c, h * w])?;
    let centered = center(tape, flat, mu)?;
    let inv = tape.recip(sigma);
    tape.broadcast(centered, inv, BinaryKind::Mul, Broadcast::Prefix)
}

fn check_pairs<T: Real>(tape: &Tape<T>, a: &[Var], b: &[Var], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim("loss", format!("{what}: {} vs {} feature maps", a.len(), b.len())));
    }
    for (&x, &y) in a.iter().zip(b) {
        if tape.shape(x) != tape.shape(y) {
            return Err(Error::dim(
                "loss",
                format!("{what}: {:?} vs {:?}", tape.shape(x), tape.shape(y)),
            ));
        }
    }
    Ok(())
}

fn sum_all<T: Real>(tape: &mut Tape<T>, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let first = match it.next() {
        Some(v) => v,
        None => return Ok(tape.constant(Tensor::scalar(T::zero()))),
    };
    it.try_fold(first, |acc, v| tape.add(acc, v))
}

/// `Σ_l mse(norm(a_l), norm(b_l))` over paired feature maps.
pub fn content_loss<T: Real>(tape: &mut Tape<T>, a: &[Var], b: &[Var]) -> Result<Var> {
    check_pairs(tape, a, b, "content")?;
    let mut terms = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let nx = normalize(tape, x)?;
        let ny = normalize(tape, y)?;
        terms.push(tape.mse(nx, ny)?);
    }
    sum_all(tape, terms)
}

/// `Σ_l mse(μ(a_l), μ(b_l)) + mse(σ(a_l), σ(b_l))`.
pub fn style_loss<T: Real>(tape: &mut Tape<T>, a: &[Var], b: &[Var]) -> Result<Var> {
    check_pairs(tape, a, b, "style")?;
    let mut terms = Vec::with_capacity(2 * a.len());
    for (&x, &y) in a.iter().zip(b) {
        let (mx, sx) = mean_std(tape, x)?;
        let (my, sy) = mean_std(tape, y)?;
        terms.push(tape.mse(mx, my)?);
        terms.push(tape.mse(sx, sy)?);
    }
    sum_all(tape, terms)
}

/// `Σ_l mse(a_l, b_l)`.
pub fn feature_loss<T: Real>(tape: &mut Tape<T>, a: &[Var], b: &[Var]) -> Result<Var> {
    check_pairs(tape, a, b, "identity")?;
    let terms = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| tape.mse(x, y))
        .collect::<Result<Vec<_>>>()?;
    sum_all(tape, terms)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub id1: f64,
    pub id2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            content: 2.0,
            style: 3.0,
            id1: 50.0,
            id2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.content, self.style, self.id1, self.id2].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn combine(&self, parts: &LossValues) -> f64 {
        self.content * parts.content + self.style * parts.style + self.id1 * parts.id1 + self.id2 * parts.id2
    }
}

/// Loss terms as tape values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossParts {
    pub content: Var,
    pub style: Var,
    pub id1: Var,
    pub id2: Var,
}

/// Loss terms as numbers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub content: f64,
    pub style: f64,
    pub id1: f64,
    pub id2: f64,
}

impl LossParts {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).data()[0].as_f64();
        LossValues {
            content: v(self.content),
            style: v(self.style),
            id1: v(self.id1),
            id2: v(self.id2),
        }
    }
}

/// `λc·Lc + λs·Ls + λid1·Lid1 + λid2·Lid2`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let terms = vec![
        tape.scale(parts.content, T::c(w.content)),
        tape.scale(parts.style, T::c(w.style)),
        tape.scale(parts.id1, T::c(w.id1)),
        tape.scale(parts.id2, T::c(w.id2)),
    ];
    sum_all(tape, terms)
}

/// Which taps the style term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StyleTaps {
    /// relu2_1..relu5_1.
    #[default]
    Training,
    /// relu1_1..relu5_1, for reporting.
    Metric,
}

impl StyleTaps {
    pub fn taps(self) -> &'static [Tap] {
        match self {
            StyleTaps::Training => &Tap::STYLE,
            StyleTaps::Metric => &Tap::ALL,
        }
    }
}

/// Feature-space view of one image, holding every tap any loss needs.
#[derive(Debug, Clone)]
pub struct Features {
    taps: Vec<(Tap, Var)>,
}

impl Features {
    pub fn of<T: Real>(tape: &mut Tape<T>, ext: &FeatureExtractor<T>, img: Var) -> Result<Self> {
        let vars = ext.extract(tape, img, &Tap::ALL)?;
        Ok(Features {
            taps: Tap::ALL.into_iter().zip(vars).collect(),
        })
    }

    pub fn get(&self, taps: &[Tap]) -> Vec<Var> {
        taps.iter()
            .map(|t| self.taps.iter().find(|(k, _)| k == t).expect("all taps extracted").1)
            .collect()
    }
}

/// All four loss terms from the images involved.
///
/// `ics` is the stylized image, `icc`/`iss` the reconstructions from
/// identical content/style pairs.
#[allow(clippy::too_many_arguments)]
pub fn loss_parts<T: Real>(
    tape: &mut Tape<T>,
    ext: &FeatureExtractor<T>,
    ic: Var,
    is: Var,
    ics: Var,
    icc: Var,
    iss: Var,
    style_taps: StyleTaps,
) -> Result<LossParts> {
    let fc = Features::of(tape, ext, ic)?;
    let fs = Features::of(tape, ext, is)?;
    let fcs = Features::of(tape, ext, ics)?;
    let content = content_loss(tape, &fcs.get(&Tap::CONTENT), &fc.get(&Tap::CONTENT))?;
    let style = style_loss(tape, &fcs.get(style_taps.taps()), &fs.get(style_taps.taps()))?;
    let (id1, id2) = identity_from_features(tape, ext, (ic, &fc), (is, &fs), icc, iss)?;
    Ok(LossParts { content, style, id1, id2 })
}

fn identity_from_features<T: Real>(
    tape: &mut Tape<T>,
    ext: &FeatureExtractor<T>,
    (ic, fc): (Var, &Features),
    (is, fs): (Var, &Features),
    icc: Var,
    iss: Var,
) -> Result<(Var, Var)> {
    let a = tape.mse(icc, ic)?;
    let b = tape.mse(iss, is)?;
    let id1 = tape.add(a, b)?;
    let fcc = Features::of(tape, ext, icc)?;
    let fss = Features::of(tape, ext, iss)?;
    let a = feature_loss(tape, &fcc.get(&Tap::STYLE), &fc.get(&Tap::STYLE))?;
    let b = feature_loss(tape, &fss.get(&Tap::STYLE), &fs.get(&Tap::STYLE))?;
    let id2 = tape.add(a, b)?;
    Ok((id1, id2))
}

/// Identity losses of a model given as `model(content, style) -> image`.
pub fn identity_losses<T: Real, M>(
    tape: &mut Tape<T>,
    ext: &FeatureExtractor<T>,
    mut model: M,
    ic: Var,
    is: Var,
) -> Result<(Var, Var)>
where
    M: FnMut(&mut Tape<T>, Var, Var) -> Result<Var>,
{
    let icc = model(tape, ic, ic)?;
    let iss = model(tape, is, is)?;
    let fc = Features::of(tape, ext, ic)?;
    let fs = Features::of(tape, ext, is)?;
    identity_from_features(tape, ext, (ic, &fc), (is, &fs), icc, iss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, side: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, side, side], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn tap_names_parse() {
        assert_eq!("relu4_1".parse::<Tap>().unwrap(), Tap::Relu4_1);
        assert!(matches!("relu6_1".parse::<Tap>(), Err(Error::UnknownTap(_))));
    }

    #[test]
    fn tap_extents_halve() {
        let ext = FeatureExtractor::<f64>::surrogate(0);
        let mut tape = Tape::new();
        let img = tape.constant(image(1, 64));
        let taps = ext.extract(&mut tape, img, &Tap::ALL).unwrap();
        let sides: Vec<usize> = taps.iter().map(|&t| tape.shape(t)[1]).collect();
        assert_eq!(sides, vec![64, 32, 16, 8, 4]);
        let again = ext.extract(&mut tape, img, &[Tap::Relu4_1]).unwrap();
        assert_eq!(tape.value(again[0]), tape.value(taps[3]));
        let small = tape.constant(image(1, 16));
        assert!(matches!(ext.extract(&mut tape, small, &[Tap::Relu1_1]), Err(Error::InputTooSmall(_))));
    }

    #[test]
    fn surrogate_separates_images() {
        let ext = FeatureExtractor::<f64>::surrogate(0);
        let mut tape = Tape::new();
        let a = tape.constant(image(1, 32));
        let b = tape.constant(image(2, 32));
        let fa = ext.extract(&mut tape, a, &[Tap::Relu3_1]).unwrap();
        let fb = ext.extract(&mut tape, b, &[Tap::Relu3_1]).unwrap();
        assert!(tape.value(fa[0]).max_abs_diff(tape.value(fb[0])).unwrap() > 0.0);
    }

    #[test]
    fn weights_sum_to_56() {
        let ones = LossValues {
            content: 1.0,
            style: 1.0,
            id1: 1.0,
            id2: 1.0,
        };
        assert_eq!(LossWeights::default().combine(&ones), 56.0);
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::scalar(1.0));
        let parts = LossParts {
            content: one,
            style: one,
            id1: one,
            id2: one,
        };
        let t = total_loss(&mut tape, &parts, &LossWeights::default()).unwrap();
        assert_eq!(tape.value(t).data()[0], 56.0);
    }

    #[test]
    fn normalization_ignores_positive_affine() {
        let mut tape = Tape::<f64>::new();
        let f = image(3, 4);
        let g = Tensor::from_fn(&[3, 4, 4], |i| {
            let c = i / 16;
            f.data()[i] * [2.0, 0.5, 3.0][c] + [1.0, -4.0, 0.25][c]
        });
        let (a, b) = (tape.constant(f), tape.constant(g));
        let l = content_loss(&mut tape, &[a], &[b]).unwrap();
        // ε breaks exact invariance by about ε/(2·var) relative per channel
        assert!(tape.value(l).data()[0] < 1e-6);
    }

    #[test]
    fn identity_model_has_zero_identity_loss() {
        let ext = FeatureExtractor::<f64>::surrogate(0);
        let mut tape = Tape::new();
        let ic = tape.constant(image(4, 32));
        let is = tape.constant(image(5, 32));
        let (a, b) = identity_losses(&mut tape, &ext, |_, c, _| Ok(c), ic, is).unwrap();
        assert_eq!(tape.value(a).data()[0], 0.0);
        assert_eq!(tape.value(b).data()[0], 0.0);

        let gray = tape.constant(Tensor::full(&[3, 32, 32], 0.5));
        let (a, b) = identity_losses(&mut tape, &ext, |_, _, _| Ok(gray), ic, is).unwrap();
        assert!(tape.value(a).data()[0] > 0.0);
        assert!(tape.value(b).data()[0] > 0.0);
    }
}
