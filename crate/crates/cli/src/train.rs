//! `train`: seeded, single-process optimisation of the full objective.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2wat::io;
use s2wat::loss::{loss_parts, total_loss, FeatureExtractor, LossValues};
use s2wat::optim::{warmup_lr, Adam};
use s2wat::{ParameterStore, S2wat, Tape, Tensor};

use crate::config::{Extractor, RunConfig};
use crate::data;
use crate::failure::{Context, Failure};

pub const LOG_HEADER: &str = "iter,content,style,id1,id2,total";

/// One line of the loss log: batch means of the four terms and their
/// weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub parts: LossValues,
    pub total: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let p = &self.parts;
        format!("{},{},{},{},{},{}", self.iter, p.content, p.style, p.id1, p.id2, self.total)
    }

    pub fn parse(line: &str) -> Option<LogRow> {
        let f: Vec<&str> = line.split(',').collect();
        let [iter, c, s, a, b, t] = f.as_slice() else {
            return None;
        };
        Some(LogRow {
            iter: iter.parse().ok()?,
            parts: LossValues {
                content: c.parse().ok()?,
                style: s.parse().ok()?,
                id1: a.parse().ok()?,
                id2: b.parse().ok()?,
            },
            total: t.parse().ok()?,
        })
    }
}

pub fn render_log(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<LogRow>,
    pub log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_weights: PathBuf,
}

pub fn extractor(cfg: &RunConfig) -> Result<FeatureExtractor<f32>, Failure> {
    match &cfg.extractor {
        Extractor::Surrogate { seed } => Ok(FeatureExtractor::surrogate(*seed)),
        Extractor::Weights(path) => {
            let store = io::load_weights(path).at(path)?;
            FeatureExtractor::from_store(store, [2, 2, 4, 4, 1]).at(path)
        }
    }
}

/// Per-pair forward pass of the training objective; returns the tape, the
/// total and the four parts.
pub fn pair_loss(
    model: &S2wat,
    store: &ParameterStore<f32>,
    ext: &FeatureExtractor<f32>,
    cfg: &RunConfig,
    content: Tensor<f32>,
    style: Tensor<f32>,
) -> Result<(Tape<f32>, s2wat::Var, LossValues), Failure> {
    let mut tape = Tape::new();
    let ic = tape.constant(content);
    let is = tape.constant(style);
    let ics = model.stylize(&mut tape, store, ic, is)?;
    let icc = model.stylize(&mut tape, store, ic, ic)?;
    let iss = model.stylize(&mut tape, store, is, is)?;
    let parts = loss_parts(&mut tape, ext, ic, is, ics, icc, iss, cfg.style_taps)?;
    let total = total_loss(&mut tape, &parts, &cfg.weights)?;
    let values = parts.values(&tape);
    Ok((tape, total, values))
}

fn header(cfg: &RunConfig) -> String {
    format!(
        "# lr(t) = lr * min(1, t/warmup_steps) * sqrt(warmup_steps / max(t, warmup_steps)), t = 1..iters\n\
         # Adam beta1={} beta2={} eps={}\n{}",
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
        cfg.to_text()
    )
}

fn checkpoint_path(dir: &Path, iter: u64) -> PathBuf {
    dir.join(format!("checkpoint_{iter:06}.s2wt"))
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, Failure> {
    let content_dir = cfg
        .content_dir
        .as_deref()
        .ok_or_else(|| Failure::usage("training needs `content_dir`"))?;
    let style_dir = cfg.style_dir.as_deref().ok_or_else(|| Failure::usage("training needs `style_dir`"))?;
    let contents = data::load_folder(content_dir)?;
    let styles = data::load_folder(style_dir)?;

    let model = S2wat::new(cfg.model.clone())?;
    let ext = extractor(cfg)?;
    let mut store = model.init_params::<f32>(cfg.seed)?;
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Failure::data(format!("cannot create {}: {e}", out.display())))?;
    let cfg_path = out.join("run.cfg");
    io::write_atomic(&cfg_path, header(cfg).as_bytes()).at(&cfg_path)?;
    let log = out.join("loss.csv");

    let mut rows = Vec::with_capacity(cfg.iters as usize);
    let mut checkpoints = Vec::new();
    let batch = cfg.batch_size as f32;
    for iter in 1..=cfg.iters {
        let mut sum = LossValues::default();
        for _ in 0..cfg.batch_size {
            let c = &contents[rng.random_range(0..contents.len())];
            let s = &styles[rng.random_range(0..styles.len())];
            let c = data::random_crop(c, cfg.crop_size, &mut rng);
            let s = data::random_crop(s, cfg.crop_size, &mut rng);
            let (mut tape, total, v) = pair_loss(&model, &store, &ext, cfg, c, s)?;
            let mean = tape.scale(total, 1.0 / batch);
            let grads = tape.backward(mean)?;
            store.accumulate_grads(&tape, &grads)?;
            sum.content += v.content;
            sum.style += v.style;
            sum.id1 += v.id1;
            sum.id2 += v.id2;
        }
        let n = cfg.batch_size as f64;
        let parts = LossValues {
            content: sum.content / n,
            style: sum.style / n,
            id1: sum.id1 / n,
            id2: sum.id2 / n,
        };
        let row = LogRow {
            iter,
            parts,
            total: cfg.weights.combine(&parts),
        };
        rows.push(row);
        let grads_finite = store.iter().all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())));
        if !row.total.is_finite() || !grads_finite {
            io::write_atomic(&log, render_log(&rows).as_bytes()).at(&log)?;
            return Err(Failure::numeric(format!(
                "non-finite {} at iteration {iter}: {}",
                if row.total.is_finite() { "gradient" } else { "loss" },
                row.to_csv()
            )));
        }
        adam.step(&mut store, warmup_lr(cfg.lr, iter, cfg.warmup_steps));
        store.zero_grads();
        if store.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Failure::numeric(format!("non-finite parameters after iteration {iter}")));
        }

        if cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 {
            let path = checkpoint_path(out, iter);
            io::save_weights(&store, &path).at(&path)?;
            io::write_atomic(&log, render_log(&rows).as_bytes()).at(&log)?;
            checkpoints.push(path);
        }
    }
    io::write_atomic(&log, render_log(&rows).as_bytes()).at(&log)?;
    let final_weights = out.join("final.s2wt");
    io::save_weights(&store, &final_weights).at(&final_weights)?;
    Ok(TrainOutcome {
        rows,
        log,
        checkpoints,
        final_weights,
    })
}
