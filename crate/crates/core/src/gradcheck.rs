//! Central finite-difference gradient checking in `f64`.
//!
//! The numeric side only ever evaluates the forward function, so it is an
//! independent check of the tape's backward rules.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Denominator floor of the relative error, so that near-zero gradients are
/// compared in absolute terms instead of amplifying round-off.
pub const REL_FLOOR: f64 = 1e-2;

/// Minimum [`Tape::kink_margin`] for a probe point to count as smooth at
/// step `1e-4`: ten steps of clearance.
pub const KINK_CLEARANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Where the worst element sits, e.g. `input0[3]` or `block.mlp.fc1.weight[12]`.
    pub worst: String,
    pub checked: usize,
    /// Elements passed over because their stencil crossed a ReLU/max-pool
    /// kink (piecewise checks only).
    pub skipped: usize,
    /// Distance of the probe point from the nearest ReLU/max-pool kink.
    pub kink_margin: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `d f / d inputs` and `d f / d params` for a scalar-valued `f`.
///
/// `f` receives a fresh tape, the store (possibly perturbed) and the input
/// handles, and must return a scalar.
pub fn check<F>(params: &ParameterStore<f64>, inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>, &[Var]) -> Result<Var>,
{
    run(params, inputs, step, usize::MAX, false, f)
}

/// [`check`] restricted to at most `per_tensor` evenly strided elements of
/// each input and parameter, for models too large to probe exhaustively.
pub fn check_sampled<F>(
    params: &ParameterStore<f64>,
    inputs: &[Tensor<f64>],
    step: f64,
    per_tensor: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>, &[Var]) -> Result<Var>,
{
    run(params, inputs, step, per_tensor, false, f)
}

/// [`check_sampled`] for networks with too many ReLU/max-pool units for any
/// probe point to clear every kink. An element whose `±step` evaluations
/// change the activation pattern ([`Tape::kink_pattern`]) has no derivative
/// on the stencil; it is passed over in favour of the next element of the
/// same tensor.
pub fn check_piecewise<F>(
    params: &ParameterStore<f64>,
    inputs: &[Tensor<f64>],
    step: f64,
    per_tensor: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>, &[Var]) -> Result<Var>,
{
    run(params, inputs, step, per_tensor, true, f)
}

fn run<F>(
    params: &ParameterStore<f64>,
    inputs: &[Tensor<f64>],
    step: f64,
    per_tensor: usize,
    skip_kinks: bool,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>, &[Var]) -> Result<Var>,
{
    let picks = |n: usize| -> Vec<usize> {
        if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|k| k * n / per_tensor + (n / per_tensor) / 2).collect()
        }
    };
    let eval = |store: &ParameterStore<f64>, xs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, store, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        Ok((tape.value(out).data()[0], tape.kink_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = f(&mut tape, params, &vars)?;
    let grads = tape.backward(out)?;
    let base = tape.kink_pattern();
    let mut bound: Vec<(String, Var)> = tape.bound_params().map(|(n, v)| (n.to_string(), v)).collect();
    bound.sort_by(|a, b| a.0.cmp(&b.0));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
        kink_margin: tape.kink_margin(),
    };
    // Probes element `j` (and, when skipping kinks, its successors) through
    // `at(j) -> ((plus, pattern), (minus, pattern))`.
    let mut probe = |label: &str,
                     analytic: &[f64],
                     picks: Vec<usize>,
                     at: &mut dyn FnMut(usize) -> Result<((f64, u64), (f64, u64))>|
     -> Result<()> {
        let n = analytic.len();
        for j0 in picks {
            for attempt in 0..n {
                let j = (j0 + attempt) % n;
                let ((plus, pp), (minus, pm)) = at(j)?;
                if skip_kinks && (pp != base || pm != base) {
                    report.skipped += 1;
                    continue;
                }
                let e = rel_error(analytic[j], (plus - minus) / (2.0 * step));
                report.checked += 1;
                if report.worst.is_empty() || e > report.max_rel_error {
                    report.max_rel_error = e;
                    report.worst = format!("{label}[{j}]");
                }
                break;
            }
        }
        Ok(())
    };

    for (i, (x, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(&tape, v);
        let mut at = |j: usize| {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += step;
            let plus = eval(params, &xs)?;
            xs[i].data_mut()[j] -= 2.0 * step;
            Ok((plus, eval(params, &xs)?))
        };
        probe(&format!("input{i}"), analytic.data(), picks(x.numel()), &mut at)?;
    }

    for (name, var) in bound {
        // names bound from some other store (a frozen extractor) are constants here
        let Some(t) = params.get(&name) else {
            continue;
        };
        if !t.requires_grad() {
            continue;
        }
        let analytic = grads.wrt(&tape, var);
        let mut at = |j: usize| {
            let mut store = params.clone();
            store.get_mut(&name).unwrap().data_mut()[j] += step;
            let plus = eval(&store, inputs)?;
            store.get_mut(&name).unwrap().data_mut()[j] -= 2.0 * step;
            Ok((plus, eval(&store, inputs)?))
        };
        probe(&name, analytic.data(), picks(t.numel()), &mut at)?;
    }
    Ok(report)
}

/// First seed whose probe point (as built by `margin_of`) keeps every kink at
/// least [`KINK_CLEARANCE`] away.
pub fn smooth_seed<I, F>(seeds: I, mut margin_of: F) -> Result<u64>
where
    I: IntoIterator<Item = u64>,
    F: FnMut(u64) -> Result<f64>,
{
    for seed in seeds {
        if margin_of(seed)? >= KINK_CLEARANCE {
            return Ok(seed);
        }
    }
    Err(Error::Contract("no smooth probe point among the candidate seeds".into()))
}

/// Replaces every `*.bias` parameter with small random values. Zero biases
/// behind a ReLU put whole regions exactly on the kink at 0, where the
/// one-sided analytic derivative and the symmetric difference disagree.
pub fn randomize_biases(store: &mut ParameterStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in store.iter_mut() {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
}

/// Reduces a tensor-valued output to a scalar through a fixed projection
/// `Σ rᵢ·yᵢ`, with `rᵢ` a deterministic pseudo-random sequence, so every
/// output element contributes a distinct weight.
pub fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let weights = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.7548776662).sin() + 0.1);
    let w = tape.constant(weights);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{BinaryKind, Broadcast};

    const H: f64 = 1e-4;
    const TOL: f64 = 1e-4;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn unary_check(f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>, shape: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut rng, shape);
        let r = check(&ParameterStore::new(), &[x], H, |t, _, v| {
            let y = f(t, v[0])?;
            project(t, y)
        })
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
    }

    fn binary_check(f: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var>, sa: &[usize], sb: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, sa);
        let b = rand_t(&mut rng, sb);
        let r = check(&ParameterStore::new(), &[a, b], H, |t, _, v| {
            let y = f(t, v[0], v[1])?;
            project(t, y)
        })
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
    }

    #[test]
    fn matmul_grads() {
        binary_check(|t, a, b| t.matmul(a, b), &[3, 4], &[4, 2], 1);
        binary_check(|t, a, b| t.matmul(a, b), &[2, 3, 4], &[2, 4, 2], 2);
        binary_check(|t, a, b| t.matmul(a, b), &[2, 3, 4], &[4, 2], 3);
    }

    #[test]
    fn elementwise_grads() {
        binary_check(|t, a, b| t.add(a, b), &[5], &[5], 4);
        binary_check(|t, a, b| t.sub(a, b), &[5], &[5], 5);
        binary_check(|t, a, b| t.mul(a, b), &[5], &[5], 6);
        binary_check(|t, a, b| t.broadcast(a, b, BinaryKind::Mul, Broadcast::Suffix), &[2, 3], &[3], 7);
        binary_check(|t, a, b| t.broadcast(a, b, BinaryKind::Add, Broadcast::Prefix), &[2, 3], &[2], 8);
        binary_check(|t, a, b| t.broadcast(a, b, BinaryKind::Mul, Broadcast::Prefix), &[2, 3], &[2], 9);
        unary_check(|t, x| Ok(t.scale(x, -1.7)), &[4], 10);
        unary_check(|t, x| Ok(t.add_scalar(x, 0.3)), &[4], 11);
    }

    #[test]
    fn activation_grads() {
        unary_check(|t, x| Ok(t.relu(x)), &[3, 4], 12);
        unary_check(|t, x| Ok(t.gelu(x)), &[3, 4], 13);
        unary_check(|t, x| Ok(t.square(x)), &[3, 4], 14);
        unary_check(
            |t, x| {
                let s = t.square(x);
                let s = t.add_scalar(s, 0.5);
                Ok(t.sqrt(s))
            },
            &[6],
            15,
        );
        unary_check(
            |t, x| {
                let s = t.add_scalar(x, 2.0);
                Ok(t.recip(s))
            },
            &[6],
            16,
        );
    }

    #[test]
    fn reduction_and_norm_grads() {
        unary_check(|t, x| Ok(t.sum(x)), &[2, 3], 17);
        unary_check(|t, x| Ok(t.mean(x)), &[2, 3], 18);
        unary_check(|t, x| t.sum_lastdim(x), &[2, 3], 19);
        unary_check(|t, x| t.softmax_lastdim(x), &[3, 5], 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inputs = [rand_t(&mut rng, &[3, 5]), rand_t(&mut rng, &[5]), rand_t(&mut rng, &[5])];
        let r = check(&ParameterStore::new(), &inputs, H, |t, _, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y)
        })
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
    }

    #[test]
    fn layout_grads() {
        unary_check(|t, x| t.transpose_last(x), &[2, 3, 4], 22);
        unary_check(|t, x| t.permute(x, &[2, 0, 1]), &[2, 3, 4], 23);
        unary_check(|t, x| t.reshape(x, &[6, 4]), &[2, 3, 4], 24);
        unary_check(|t, x| t.reflect_pad_2d(x, 1, 2, 2, 1), &[2, 3, 4], 25);
        unary_check(|t, x| t.upsample_nearest2(x), &[2, 2, 3], 26);
        unary_check(|t, x| t.max_pool2(x), &[2, 4, 4], 27);
        binary_check(
            |t, a, b| {
                let s = t.stack(&[a, b, a])?;
                t.permute(s, &[1, 0, 2])
            },
            &[2, 3],
            &[2, 3],
            28,
        );
    }

    #[test]
    fn conv_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let inputs = [rand_t(&mut rng, &[2, 4, 4]), rand_t(&mut rng, &[3, 2, 3, 3]), rand_t(&mut rng, &[3])];
        let r = check(&ParameterStore::new(), &inputs, H, |t, _, v| {
            let p = t.reflect_pad_2d(v[0], 1, 1, 1, 1)?;
            let y = t.conv2d(p, v[1], v[2])?;
            project(t, y)
        })
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu'(0) = 0 on the tape, but the symmetric difference at 0 is 1/2
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let r = check(&ParameterStore::new(), &[x], H, |t, _, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(!r.passes(TOL));
    }

    #[test]
    fn piecewise_skips_stencils_across_a_kink() {
        let x = Tensor::from_f64(&[2], &[0.0, 0.5]).unwrap();
        let r = check_piecewise(&ParameterStore::new(), &[x], H, usize::MAX, |t, _, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
        assert_eq!(r.skipped, 1);
        assert_eq!(r.worst, "input0[1]");
    }
}
