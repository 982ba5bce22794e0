//! `stylize` (with repeated rounds) and `analyze` (feature, attention and
//! similarity maps).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use s2wat::io;
use s2wat::model::MIN_SIDE;
use s2wat::{ParameterStore, S2wat, Tape, Tensor};

use crate::config::RunConfig;
use crate::failure::{Context, Failure};

/// Builds the configured model and loads `path` into it. The file must hold
/// exactly the model's tensors with matching extents.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(S2wat, ParameterStore<f32>), Failure> {
    let model = S2wat::new(cfg.model.clone())?;
    let mut store = model.init_params::<f32>(0)?;
    let file = io::load_weights(path).at(path)?;
    let want: BTreeSet<&str> = store.names().collect();
    let have: BTreeSet<&str> = file.names().collect();
    if let Some(extra) = have.difference(&want).next() {
        return Err(Failure::data(format!(
            "{}: tensor `{extra}` does not belong to the configured model",
            path.display()
        )));
    }
    store.load_from(&file).at(path)?;
    Ok((model, store))
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>, Failure> {
    let img = io::load_ppm(path).at(path)?;
    let [_, h, w] = *img.shape() else { unreachable!() };
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Failure::data(format!(
            "{}: {w}x{h} is below the minimum {MIN_SIDE}x{MIN_SIDE}",
            path.display()
        )));
    }
    Ok(img)
}

/// Output path of round `r` (1-based) out of `rounds`.
pub fn round_path(out: &Path, r: usize, rounds: usize) -> PathBuf {
    if rounds == 1 {
        return out.to_path_buf();
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    let width = rounds.to_string().len().max(2);
    out.with_file_name(format!("{stem}_round{r:0width$}{ext}"))
}

pub fn stylize_image(model: &S2wat, store: &ParameterStore<f32>, content: &Tensor<f32>, style: &Tensor<f32>) -> Result<Tensor<f32>, Failure> {
    let mut tape = Tape::new();
    let c = tape.constant(content.clone());
    let s = tape.constant(style.clone());
    let y = model.stylize(&mut tape, store, c, s)?;
    let out = tape.value(y).clone();
    if !out.is_finite() {
        return Err(Failure::numeric("stylized image has non-finite values"));
    }
    Ok(out)
}

/// Stylizes `content` with `style`; with `rounds > 1` each round's output
/// (as written to disk) becomes the next round's content. Returns the files
/// written, one per round.
pub fn stylize(
    cfg: &RunConfig,
    content: &Path,
    style: &Path,
    weights: &Path,
    out: &Path,
    rounds: usize,
) -> Result<Vec<PathBuf>, Failure> {
    if rounds == 0 {
        return Err(Failure::usage("--rounds must be at least 1"));
    }
    let (model, store) = load_model(cfg, weights)?;
    let mut current = load_image(content)?;
    let style = load_image(style)?;
    let mut written = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let y = stylize_image(&model, &store, &current, &style)?;
        let bytes = io::encode_ppm(&y)?;
        let path = round_path(out, r, rounds);
        io::write_atomic(&path, &bytes).at(&path)?;
        written.push(path);
        current = io::decode_ppm(&bytes)?;
    }
    Ok(written)
}

/// Min-max normalised grayscale image of an `h × w` map (constant maps
/// become black).
pub fn grayscale(values: &[f64], h: usize, w: usize) -> Tensor<f32> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Tensor::from_fn(&[3, h, w], |i| {
        let v = values[i % (h * w)];
        if span > 0.0 {
            ((v - lo) / span) as f32
        } else {
            0.0
        }
    })
}

/// Style-grid probe points: four corners (top-left, top-right, bottom-left,
/// bottom-right), then the centre `(⌊H/2⌋, ⌊W/2⌋)`.
pub fn probe_points(h: usize, w: usize) -> [(usize, usize); 5] {
    [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1), (h / 2, w / 2)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub content_grid: (usize, usize),
    pub style_grid: (usize, usize),
    pub feature_maps: Vec<PathBuf>,
    pub attention_maps: Vec<PathBuf>,
    pub similarity_maps: Vec<PathBuf>,
    pub probe_points: [(usize, usize); 5],
    /// Largest `|Σ row − 1|` over every self- and cross-attention map of
    /// every transfer layer.
    pub max_row_error: f64,
}

impl AnalysisReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "content_grid = {}x{}", self.content_grid.0, self.content_grid.1);
        let _ = writeln!(s, "style_grid = {}x{}", self.style_grid.0, self.style_grid.1);
        let _ = writeln!(s, "feature_maps = {}", self.feature_maps.len());
        let _ = writeln!(s, "attention_maps = {}", self.attention_maps.len());
        for (k, (y, x)) in self.probe_points.iter().enumerate() {
            let _ = writeln!(s, "p{} = ({y}, {x})", k + 1);
        }
        let _ = writeln!(s, "max_row_error = {:e}", self.max_row_error);
        s
    }
}

/// Writes `features/`, `attention/` and `similarity/` maps plus
/// `summary.txt` under `out`.
pub fn analyze(cfg: &RunConfig, content: &Path, style: &Path, weights: &Path, out: &Path) -> Result<AnalysisReport, Failure> {
    let (model, store) = load_model(cfg, weights)?;
    let content = load_image(content)?;
    let style = load_image(style)?;
    let mut tape = Tape::new();
    let c = tape.constant(content);
    let s = tape.constant(style);
    let trace = model.trace(&mut tape, &store, c, s)?;

    let &[ch, cw, d] = tape.shape(trace.content.last()) else { unreachable!() };
    let &[sh, sw, _] = tape.shape(trace.style.last()) else { unreachable!() };
    for dir in ["features", "attention", "similarity"] {
        let p = out.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| Failure::data(format!("cannot create {}: {e}", p.display())))?;
    }
    let save = |img: &Tensor<f32>, path: PathBuf| -> Result<PathBuf, Failure> {
        io::save_ppm(img, &path).at(&path)?;
        Ok(path)
    };

    let feats: Vec<f64> = tape.value(trace.content.last()).data().iter().map(|&v| v as f64).collect();
    let mut feature_maps = Vec::with_capacity(d);
    for k in 0..d {
        let chan: Vec<f64> = (0..ch * cw).map(|t| feats[t * d + k]).collect();
        feature_maps.push(save(&grayscale(&chan, ch, cw), out.join(format!("features/channel_{k:03}.ppm")))?);
    }

    let mut max_row_error = 0.0f64;
    for layer in &trace.maps {
        for m in [layer.self_attention, layer.cross_attention] {
            let t = tape.value(m);
            let cols = *t.shape().last().expect("rank 3");
            for row in t.data().chunks(cols) {
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                max_row_error = max_row_error.max((sum - 1.0).abs());
            }
        }
    }

    let (nc, ns) = (ch * cw, sh * sw);
    let mut attention_maps = Vec::new();
    let mut similarity_maps = Vec::new();
    let points = probe_points(sh, sw);
    if let Some(first) = trace.maps.first() {
        let cross: Vec<f64> = tape.value(first.cross_attention).data().iter().map(|&v| v as f64).collect();
        let heads = cross.len() / (nc * ns);
        for h in 0..heads {
            let map = &cross[h * nc * ns..(h + 1) * nc * ns];
            attention_maps.push(save(&grayscale(map, nc, ns), out.join(format!("attention/head{h}.ppm")))?);
        }
        for (k, &(y, x)) in points.iter().enumerate() {
            let j = y * sw + x;
            let sim: Vec<f64> = (0..nc)
                .map(|i| (0..heads).map(|h| cross[(h * nc + i) * ns + j]).sum::<f64>() / heads as f64)
                .collect();
            similarity_maps.push(save(&grayscale(&sim, ch, cw), out.join(format!("similarity/p{}.ppm", k + 1)))?);
        }
    }

    let report = AnalysisReport {
        content_grid: (ch, cw),
        style_grid: (sh, sw),
        feature_maps,
        attention_maps,
        similarity_maps,
        probe_points: points,
        max_row_error,
    };
    let summary = out.join("summary.txt");
    io::write_atomic(&summary, report.summary().as_bytes()).at(&summary)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_paths() {
        let out = Path::new("/tmp/x/out.ppm");
        assert_eq!(round_path(out, 1, 1), out);
        assert_eq!(round_path(out, 3, 3), Path::new("/tmp/x/out_round03.ppm"));
        assert_eq!(round_path(out, 7, 120), Path::new("/tmp/x/out_round007.ppm"));
    }

    #[test]
    fn probe_points_cover_corners_and_centre() {
        assert_eq!(probe_points(4, 6), [(0, 0), (0, 5), (3, 0), (3, 5), (2, 3)]);
        assert_eq!(probe_points(1, 1), [(0, 0); 5]);
    }

    #[test]
    fn grayscale_normalises() {
        let g = grayscale(&[1.0, 3.0, 2.0, 1.0], 2, 2);
        assert_eq!(&g.data()[..4], &[0.0, 1.0, 0.5, 0.0]);
        assert!(grayscale(&[2.0; 4], 2, 2).data().iter().all(|&v| v == 0.0));
    }
}
