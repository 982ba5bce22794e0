//! Argument parsing and dispatch.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, KEYS, SEED_ENV};
use crate::failure::{Context, Failure};
use crate::{data, infer, tools, train};

#[derive(Debug, Parser)]
#[command(
    name = "s2wat",
    version,
    about = "Strips-window attention style transfer",
    after_help = "Every config key can also be given as `--key value` (e.g. `--lr 3e-4 --iters 200`).\n\
                  S2WAT_SEED overrides the seed of the config file; a `--seed` flag overrides both."
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on folders of PPM images (`content_dir`, `style_dir`).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stylize one content image with one style image.
    Stylize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Feed each output back as the next content image this many times.
        #[arg(long, default_value_t = 1)]
        rounds: usize,
    },
    /// Dump encoder feature maps, transfer attention maps and probe-point
    /// similarity maps.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic vs. measured attention multiplication counts as CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        sides: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2,4")]
        windows: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "8,16")]
        channels: Vec<usize>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic gradient/checkerboard/noise images.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Images per split (content and style).
        #[arg(long, default_value_t = 2)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Run the built-in invariant checks.
    Verify,
}

/// Separates `--key value` / `--key=value` config overrides from the
/// subcommand's own arguments.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>), Failure> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        let key = name.replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            rest.push(a.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().cloned().ok_or_else(|| Failure::usage(format!("--{name} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run(argv: &[String], env_seed: Option<&str>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    match dispatch(argv, env_seed, stdout, stderr) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "error: {f}");
            f.code()
        }
    }
}

fn dispatch(argv: &[String], env_seed: Option<&str>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    let (rest, overrides) = split_overrides(argv)?;
    let args = match Args::try_parse_from(&rest) {
        Ok(a) => a,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    Ok(())
                }
                _ => Err(Failure::usage(e.to_string().trim_end().trim_start_matches("error: "))),
            };
        }
    };
    let resolve = |config: &Option<PathBuf>| RunConfig::resolve(config.as_deref(), env_seed, &overrides);
    let out_err = |e: std::io::Error| Failure::data(format!("cannot write output: {e}"));

    match args.command {
        Command::Train { config } => {
            let cfg = resolve(&config)?;
            let outcome = train::train(&cfg)?;
            if let Some(last) = outcome.rows.last() {
                writeln!(stdout, "{}", train::LOG_HEADER).map_err(out_err)?;
                writeln!(stdout, "{}", last.to_csv()).map_err(out_err)?;
            }
            writeln!(stdout, "log: {}", outcome.log.display()).map_err(out_err)?;
            writeln!(stdout, "weights: {}", outcome.final_weights.display()).map_err(out_err)?;
        }
        Command::Stylize {
            config,
            content,
            style,
            weights,
            out,
            rounds,
        } => {
            let cfg = resolve(&config)?;
            for p in infer::stylize(&cfg, &content, &style, &weights, &out, rounds)? {
                writeln!(stdout, "{}", p.display()).map_err(out_err)?;
            }
        }
        Command::Analyze {
            config,
            content,
            style,
            weights,
            out,
        } => {
            let cfg = resolve(&config)?;
            let report = infer::analyze(&cfg, &content, &style, &weights, &out)?;
            write!(stdout, "{}", report.summary()).map_err(out_err)?;
            if report.max_row_error > 1e-6 {
                return Err(Failure::numeric(format!(
                    "attention rows deviate from 1 by {:e}",
                    report.max_row_error
                )));
            }
        }
        Command::Bench {
            sides,
            windows,
            channels,
            out,
        } => {
            if !overrides.is_empty() {
                return Err(Failure::usage("bench takes no config keys"));
            }
            let report = tools::bench(&sides, &windows, &channels)?;
            let csv = report.to_csv();
            match out {
                Some(p) => s2wat::io::write_atomic(&p, csv.as_bytes()).at(&p)?,
                None => write!(stdout, "{csv}").map_err(out_err)?,
            }
            for line in report.discrepancies(0.05) {
                let _ = writeln!(stderr, "{line}");
            }
            for &c in &channels {
                if let Some(s) = tools::slope(&report, s2wat::complexity::AttentionKind::Msa, 0, c) {
                    let _ = writeln!(stderr, "slope msa C={c}: {s:.3}");
                }
                for &m in &windows {
                    for kind in [s2wat::complexity::AttentionKind::Wmsa, s2wat::complexity::AttentionKind::Spw] {
                        if let Some(s) = tools::slope(&report, kind, m, c) {
                            let _ = writeln!(stderr, "slope {kind} M={m} C={c}: {s:.3}");
                        }
                    }
                }
            }
        }
        Command::GenData { config, out, count, size } => {
            let cfg = resolve(&config)?;
            if count == 0 || size < s2wat::model::MIN_SIDE {
                return Err(Failure::usage(format!(
                    "gen-data needs --count >= 1 and --size >= {}",
                    s2wat::model::MIN_SIDE
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for p in data::generate(&out, count, size, &mut rng)? {
                writeln!(stdout, "{}", p.display()).map_err(out_err)?;
            }
        }
        Command::Verify => {
            if !overrides.is_empty() {
                return Err(Failure::usage("verify takes no config keys"));
            }
            let (text, status) = tools::verify_report(&tools::verify());
            write!(stdout, "{text}").map_err(out_err)?;
            status?;
        }
    }
    Ok(())
}

/// Reads `S2WAT_SEED`, treating an unset variable as absent.
pub fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}
