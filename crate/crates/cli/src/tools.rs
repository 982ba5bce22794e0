//! `bench` and `verify`.

use s2wat::attention::{attn_merge, window_partition, window_reverse, BlockConfig, SpwBlock, WindowGeometry};
use s2wat::complexity::{loglog_slope, AttentionKind, ComplexityReport};
use s2wat::gradcheck;
use s2wat::io;
use s2wat::loss::{total_loss, LossParts, LossWeights};
use s2wat::{Init, ModelConfig, ParameterStore, S2wat, Tape, Tensor};

use crate::failure::Failure;

pub fn bench(sides: &[usize], windows: &[usize], channels: &[usize]) -> Result<ComplexityReport, Failure> {
    if sides.is_empty() || windows.is_empty() || channels.is_empty() {
        return Err(Failure::usage("bench needs at least one side, window and channel count"));
    }
    Ok(ComplexityReport::run(sides, windows, channels)?)
}

/// Log-log slope of measured counts against `h·w` for one kind, window and
/// channel count.
pub fn slope(report: &ComplexityReport, kind: AttentionKind, m: usize, c: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = report
        .rows
        .iter()
        .filter(|r| r.kind == kind && r.c == c && (kind == AttentionKind::Msa || r.m == m))
        .map(|r| ((r.h * r.w) as f64, r.measured as f64))
        .collect();
    (pts.len() >= 2).then(|| loglog_slope(&pts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String), s2wat::Error>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Quick invariant suite run by `verify`.
pub fn verify() -> Vec<Check> {
    vec![
        check("softmax rows sum to one", || {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 1000.0, 0.0, -5.0])?);
            let s = tape.softmax_lastdim(x)?;
            let d = tape.value(s).data();
            let err = (d[..3].iter().sum::<f64>() - 1.0).abs().max((d[3..].iter().sum::<f64>() - 1.0).abs());
            Ok((err < 1e-6 && (d[2] - 0.6652).abs() < 1e-4, format!("row error {err:e}")))
        }),
        check("attn merge matches loop", || {
            let mut tape = Tape::<f64>::new();
            let xs: Vec<Tensor<f64>> = (0..4)
                .map(|k| Tensor::from_fn(&[3, 5], |i| ((i + 7 * k) as f64 * 0.31).sin()))
                .collect();
            let v: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let z = attn_merge(&mut tape, v[0], v[1], v[2], v[3], false)?;
            let mut err = 0.0f64;
            for t in 0..3 {
                let row = |k: usize| &xs[k].data()[t * 5..t * 5 + 5];
                for j in 0..5 {
                    let want: f64 = (0..4)
                        .map(|k| row(0).iter().zip(row(k)).map(|(a, b)| a * b).sum::<f64>() * row(k)[j])
                        .sum();
                    err = err.max((tape.value(z).data()[t * 5 + j] - want).abs());
                }
            }
            Ok((err < 1e-10, format!("max diff {err:e}")))
        }),
        check("window partition roundtrip", || {
            let mut ok = true;
            for g in [
                WindowGeometry::horizontal(2, (4, 6))?,
                WindowGeometry::vertical(2, (4, 6))?,
                WindowGeometry::square(1, (4, 6))?,
            ] {
                let mut tape = Tape::<f32>::new();
                let x = Tensor::from_fn(&[4, 6, 3], |i| i as f32);
                let v = tape.constant(x.clone());
                let p = window_partition(&mut tape, v, &g)?;
                let b = window_reverse(&mut tape, p, &g)?;
                ok &= tape.value(b) == &x;
            }
            Ok((ok, String::new()))
        }),
        check("strips-window block gradients", || {
            let block = SpwBlock::new("blk", BlockConfig::new(4, 2, 1))?;
            let mut store = ParameterStore::<f64>::new();
            block.init(&mut store, &mut Init::new(1))?;
            gradcheck::randomize_biases(&mut store, 1);
            let x = Tensor::from_fn(&[2, 2, 4], |i| (i as f64 * 0.77).sin());
            let r = gradcheck::check(&store, &[x], 1e-4, |t, s, v| {
                let y = block.forward(t, s, v[0])?;
                gradcheck::project(t, y)
            })?;
            Ok((r.passes(1e-4), format!("max rel error {:e} at {}", r.max_rel_error, r.worst)))
        }),
        check("complexity counts", || {
            let r = ComplexityReport::run(&[8, 16], &[2, 4], &[8])?;
            let exact = r.rows.iter().all(|row| row.measured == row.analytic);
            Ok((exact, format!("{} grid points", r.rows.len())))
        }),
        check("weighted total of unit parts", || {
            let mut tape = Tape::<f64>::new();
            let one = |t: &mut Tape<f64>| t.constant(Tensor::scalar(1.0));
            let parts = LossParts {
                content: one(&mut tape),
                style: one(&mut tape),
                id1: one(&mut tape),
                id2: one(&mut tape),
            };
            let total = total_loss(&mut tape, &parts, &LossWeights::default())?;
            let v = tape.value(total).data()[0];
            Ok((v == 56.0, format!("{v}")))
        }),
        check("weights and image files roundtrip", || {
            let model = S2wat::new(ModelConfig::desk())?;
            let store = model.init_params::<f32>(0)?;
            let bytes = io::encode_weights(&store);
            let again = io::encode_weights(&io::decode_weights(&bytes)?);
            let img = Tensor::from_fn(&[3, 5, 4], |i| (i * 37 % 256) as f32 / 255.0);
            let ppm = io::encode_ppm(&img)?;
            let back = io::encode_ppm(&io::decode_ppm(&ppm)?)?;
            Ok((again == bytes && back == ppm, format!("{} bytes of weights", bytes.len())))
        }),
        check("output extents equal input extents", || {
            let model = S2wat::new(ModelConfig::desk())?;
            let store = model.init_params::<f32>(0)?;
            let mut tape = Tape::new();
            let c = tape.constant(Tensor::full(&[3, 30, 34], 0.5));
            let s = tape.constant(Tensor::full(&[3, 32, 32], 0.2));
            let y = model.stylize(&mut tape, &store, c, s)?;
            Ok((tape.shape(y) == [3, 30, 34], format!("{:?}", tape.shape(y))))
        }),
    ]
}

pub fn verify_report(checks: &[Check]) -> (String, Result<(), Failure>) {
    let mut out = String::new();
    for c in checks {
        out.push_str(&format!(
            "{} {}{}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            if c.detail.is_empty() { String::new() } else { format!(" ({})", c.detail) }
        ));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    let status = if failed == 0 {
        Ok(())
    } else {
        Err(Failure::numeric(format!("{failed} of {} checks failed", checks.len())))
    };
    (out, status)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_suite_passes() {
        let checks = verify();
        let (text, status) = verify_report(&checks);
        assert!(status.is_ok(), "{text}");
        assert_eq!(text.lines().count(), checks.len());
    }

    #[test]
    fn slopes_from_report() {
        let r = bench(&[8, 16, 32], &[2], &[8]).unwrap();
        let wmsa = slope(&r, AttentionKind::Wmsa, 2, 8).unwrap();
        assert!((wmsa - 1.0).abs() < 1e-9, "{wmsa}");
        assert!(bench(&[], &[2], &[8]).is_err());
    }
}
