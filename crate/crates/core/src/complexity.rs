//! Analytic multiplication counts of global, window and strips-window
//! attention, and instrumented measurement of the real forward passes.
//!
//! Only multiplications inside matrix products are counted; softmax,
//! normalization and bias additions are excluded. Counts cover the attention
//! module alone (projections included, MLP and LayerNorm excluded).

use std::fmt;
use std::str::FromStr;

use crate::attention::{global_msa, window_attention, AttentionParams, BlockConfig, SpwBlock, WindowGeometry};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::params::{Init, ParameterStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Msa,
    Wmsa,
    Spw,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::Msa, AttentionKind::Wmsa, AttentionKind::Spw];
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Msa => "msa",
            AttentionKind::Wmsa => "wmsa",
            AttentionKind::Spw => "spw",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msa" => Ok(AttentionKind::Msa),
            "wmsa" => Ok(AttentionKind::Wmsa),
            "spw" => Ok(AttentionKind::Spw),
            _ => Err(Error::Config(format!("unknown attention kind `{s}` (msa, wmsa, spw)"))),
        }
    }
}

/// `2(wh)²C + 4whC²`
pub fn flops_msa(h: u64, w: u64, c: u64) -> u64 {
    let n = h * w;
    2 * n * n * c + 4 * n * c * c
}

/// `2M²whC + 4whC²`
pub fn flops_wmsa(h: u64, w: u64, m: u64, c: u64) -> u64 {
    let n = h * w;
    2 * m * m * n * c + 4 * n * c * c
}

/// `2M(w²h + wh² + 4Mwh)C + 12whC² + 8whC`, with `M` the strip width (the
/// square branch uses `2M × 2M` windows).
pub fn flops_spw(h: u64, w: u64, m: u64, c: u64) -> u64 {
    spw_terms(h, w, m, c).total()
}

/// Per-term split of the strips-window count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpwTerms {
    pub horizontal: u64,
    pub vertical: u64,
    pub square: u64,
    pub projections: u64,
    pub merge: u64,
}

impl SpwTerms {
    pub fn total(&self) -> u64 {
        self.horizontal + self.vertical + self.square + self.projections + self.merge
    }
}

impl fmt::Display for SpwTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "horizontal={} vertical={} square={} projections={} merge={}",
            self.horizontal, self.vertical, self.square, self.projections, self.merge
        )
    }
}

pub fn spw_terms(h: u64, w: u64, m: u64, c: u64) -> SpwTerms {
    SpwTerms {
        horizontal: 2 * m * w * w * h * c,
        vertical: 2 * m * w * h * h * c,
        square: 8 * m * m * w * h * c,
        projections: 12 * w * h * c * c,
        merge: 8 * w * h * c,
    }
}

pub fn analytic(kind: AttentionKind, h: u64, w: u64, m: u64, c: u64) -> u64 {
    match kind {
        AttentionKind::Msa => flops_msa(h, w, c),
        AttentionKind::Wmsa => flops_wmsa(h, w, m, c),
        AttentionKind::Spw => flops_spw(h, w, m, c),
    }
}

/// Runs the real attention forward on an `h × w × C` grid and returns the
/// multiplications counted. `m` is the window side for `wmsa` and the strip
/// width for `spw`; it is ignored for `msa`.
pub fn measure(kind: AttentionKind, h: usize, w: usize, m: usize, c: usize) -> Result<u64> {
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Geometry(format!("empty grid {h}x{w}x{c}")));
    }
    let mut store = ParameterStore::<f32>::new();
    let mut init = Init::new(0);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[h, w, c], |i| ((i % 17) as f32 - 8.0) / 8.0));
    match kind {
        AttentionKind::Msa => {
            let p = AttentionParams::new("msa", c, 1, None)?;
            p.init(&mut store, &mut init)?;
            let flat = tape.reshape(x, &[h * w, c])?;
            tape.start_counting();
            global_msa(&mut tape, &store, flat, &p)?;
        }
        AttentionKind::Wmsa => {
            let g = WindowGeometry::square_window(m, (h, w))?;
            let p = AttentionParams::new("wmsa", c, 1, None)?;
            p.init(&mut store, &mut init)?;
            tape.start_counting();
            window_attention(&mut tape, &store, x, &g, &p)?;
        }
        AttentionKind::Spw => {
            let block = SpwBlock::new("spw", BlockConfig::new(c, 1, m))?;
            block.init(&mut store, &mut init)?;
            tape.start_counting();
            block.attention(&mut tape, &store, x, (h, w), m)?;
        }
    }
    Ok(tape.stop_counting())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub kind: AttentionKind,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub c: usize,
    pub analytic: u64,
    pub measured: u64,
}

impl ReportRow {
    pub fn ratio(&self) -> f64 {
        self.measured as f64 / self.analytic as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComplexityReport {
    pub rows: Vec<ReportRow>,
}

impl ComplexityReport {
    /// Measures every kind at every grid point; points whose grid the window
    /// does not tile are skipped.
    pub fn run(sides: &[usize], windows: &[usize], channels: &[usize]) -> Result<Self> {
        let mut rows = Vec::new();
        for &s in sides {
            for &m in windows {
                for &c in channels {
                    for kind in AttentionKind::ALL {
                        let tile = if kind == AttentionKind::Spw { 2 * m } else { m };
                        if s % tile != 0 {
                            continue;
                        }
                        rows.push(ReportRow {
                            kind,
                            h: s,
                            w: s,
                            m,
                            c,
                            analytic: analytic(kind, s as u64, s as u64, m as u64, c as u64),
                            measured: measure(kind, s, s, m, c)?,
                        });
                    }
                }
            }
        }
        Ok(ComplexityReport { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,h,w,M,C,analytic,measured,ratio\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.6}\n",
                r.kind,
                r.h,
                r.w,
                r.m,
                r.c,
                r.analytic,
                r.measured,
                r.ratio()
            ));
        }
        out
    }

    /// Per-term breakdown for strips-window rows that miss `tolerance`.
    pub fn discrepancies(&self, tolerance: f64) -> Vec<String> {
        self.rows
            .iter()
            .filter(|r| r.kind == AttentionKind::Spw && (r.ratio() - 1.0).abs() > tolerance)
            .map(|r| {
                format!(
                    "spw h={} w={} M={} C={}: measured {} vs analytic {} ({})",
                    r.h,
                    r.w,
                    r.m,
                    r.c,
                    r.measured,
                    r.analytic,
                    spw_terms(r.h as u64, r.w as u64, r.m as u64, r.c as u64)
                )
            })
            .collect()
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}
