//! Command-line front end. Every subcommand is deterministic given its flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::datagen::{self, Dataset};
use crate::dynopool::discrete_extent;
use crate::error::{Error, Result};
use crate::gradcheck::{self, SuiteOptions};
use crate::network::{Model, NetworkSpec};
use crate::trainer::{self, TrainConfig, TrainState, CSV_HEADER};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "DYNOPOOL_THREADS";

#[derive(Parser, Debug)]
#[command(name = "dynopool", version, about = "Learnable feature-map resizing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Transform {
    Base,
    #[value(name = "stretch_v")]
    StretchV,
    #[value(name = "stretch_h")]
    StretchH,
    Tile,
    Large,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Gen {
        #[arg(long, value_enum)]
        transform: Transform,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2048)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Mosaic side for `tile`.
        #[arg(long, default_value_t = 4)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write metrics and a final checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `tiny3`, `tiny5` or a network config file.
        #[arg(long, default_value = "tiny3")]
        arch: String,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Keep every scale factor at its initial value.
        #[arg(long)]
        freeze_scales: bool,
        #[arg(long)]
        lr_alpha: Option<f64>,
        #[arg(long)]
        lr_weights: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Batch shards reduced in fixed order (results do not depend on threads).
        #[arg(long, default_value_t = 1)]
        shards: usize,
    },
    /// Train once per λ and print the GMACs / accuracy trade-off table.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// `tiny3`, `tiny5` or a network config file.
        #[arg(long, default_value = "tiny3")]
        arch: String,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 1.0, 10.0])]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Summarize a metrics CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Write a bar chart of the final per-layer H x W.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

/// Failures that are not library errors.
#[derive(Debug)]
enum Failure {
    Lib(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Layer { source, .. } => exit_code(source),
        Error::Shape { .. } => EXIT_USAGE,
        Error::Io(_) | Error::DatasetFormat(_) | Error::Checkpoint { .. } | Error::Metrics(_) => EXIT_IO,
    }
}

pub fn main() -> ExitCode {
    run(std::env::args_os())
}

/// Parses `args` (program name first), runs the command and maps the outcome
/// to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen {
            transform,
            seed,
            n,
            k,
            size,
            grid,
            out,
        } => {
            let d = generate(transform, seed, n, k, size, grid)?;
            d.save(&out)?;
            let (c, h, w) = d.image_shape();
            println!("N={} shape=({c},{h},{w}) K={}", d.len(), d.num_classes);
            Ok(())
        }
        Command::Train {
            data,
            arch,
            lambda,
            epochs,
            seed,
            metrics,
            ckpt,
            resume,
            freeze_scales,
            lr_alpha,
            lr_weights,
            batch_size,
            shards,
        } => {
            let data = Dataset::load(&data)?;
            let model = build_model(&arch, &data, seed)?;
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                epochs,
                lambda,
                seed,
                freeze_scales,
                lr_alpha: lr_alpha.unwrap_or(defaults.lr_alpha),
                lr_weights: lr_weights.unwrap_or(defaults.lr_weights),
                batch_size: batch_size.unwrap_or(defaults.batch_size),
                shards,
                threads: worker_threads(shards),
                ..defaults
            };
            let mut state = match resume {
                Some(path) => checkpoint::load(&path, model)?,
                None => TrainState::new(model),
            };
            let rows = trainer::train_with(&mut state, &data, &cfg, |_, row| {
                println!(
                    "epoch {:>3}  loss {:.4}  train_acc {:.3}  eval_acc {:.3}  gmacs {:.4e}",
                    row.epoch, row.train_loss, row.train_acc, row.eval_acc, row.gmacs
                );
                Ok(())
            })?;
            trainer::write_metrics(&metrics, &rows)?;
            checkpoint::save(&state, &ckpt)?;
            Ok(())
        }
        Command::Sweep {
            data,
            arch,
            lambdas,
            epochs,
            seed,
            out,
        } => {
            let data = Dataset::load(&data)?;
            let mut table = String::from("lambda,final_gmacs,final_eval_acc,best_eval_acc\n");
            for &lambda in &lambdas {
                let mut state = TrainState::new(build_model(&arch, &data, seed)?);
                let cfg = TrainConfig {
                    epochs,
                    lambda,
                    seed,
                    threads: worker_threads(1),
                    ..TrainConfig::default()
                };
                let rows = trainer::train(&mut state, &data, &cfg)?;
                let last = rows.last().expect("at least the epoch-0 row");
                let best = rows.iter().map(|r| r.eval_acc).fold(0.0, f64::max);
                let _ = writeln!(table, "{lambda},{},{},{best}", last.gmacs, last.eval_acc);
            }
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(path, &table).map_err(Error::from)?;
            }
            Ok(())
        }
        Command::Gradcheck { seed, inject_fault } => {
            let opts = SuiteOptions {
                seed,
                flip_alpha_sign: inject_fault,
                ..SuiteOptions::default()
            };
            let reports = gradcheck::run_suite(&opts)?;
            print!("{}", gradcheck::format_report(&reports));
            let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            if failed.is_empty() {
                println!("all {} checks passed", reports.len());
                Ok(())
            } else {
                Err(Failure::Numeric(format!("gradient checks failed: {}", failed.join(", "))))
            }
        }
        Command::Report { metrics, svg } => {
            let text = std::fs::read_to_string(&metrics).map_err(Error::from)?;
            let summary = summarize(&text)?;
            print!("{}", summary.render());
            if let Some(path) = svg {
                std::fs::write(path, summary.svg()).map_err(Error::from)?;
            }
            Ok(())
        }
    }
}

/// Builds the requested dataset; all randomness comes from one generator
/// seeded with `seed`.
pub fn generate(transform: Transform, seed: u64, n: usize, k: usize, size: usize, grid: usize) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_seed: u64 = rng.gen();
    let transform_seed: u64 = rng.gen();
    if matches!(transform, Transform::Tile | Transform::Large) && !size.is_multiple_of(2) {
        return Err(Error::invalid(format!("odd size {size}: {transform:?} halves the base exactly")));
    }
    let base = datagen::make_base(base_seed, n, k, size)?;
    match transform {
        Transform::Base => Ok(base),
        Transform::StretchV => datagen::transform_stretch_v(&base, transform_seed),
        Transform::StretchH => datagen::transform_stretch_h(&base, transform_seed),
        Transform::Tile => datagen::transform_tile(&base, grid),
        Transform::Large => datagen::transform_large(&base),
    }
}

/// `arch` is a built-in name or the path of a plain-text network config;
/// fixed-stride resizers in a config are replaced by learnable ones.
fn build_model(arch: &str, data: &Dataset, seed: u64) -> Result<Model> {
    let spec = match arch {
        "tiny3" | "tiny5" => NetworkSpec::builtin(arch, data.image_shape(), data.num_classes)?,
        path if Path::new(path).is_file() => {
            let spec = NetworkSpec::parse_config(&std::fs::read_to_string(path)?)?.replace_resizers()?;
            if spec.input != data.image_shape() || spec.num_classes != data.num_classes {
                return Err(Error::invalid(format!(
                    "config expects input {:?} with {} classes, dataset has {:?} with {}",
                    spec.input,
                    spec.num_classes,
                    data.image_shape(),
                    data.num_classes
                )));
            }
            spec
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown architecture `{other}` (expected tiny3, tiny5 or a config file)"
            )))
        }
    };
    Model::init(spec, seed)
}

/// Worker count: `DYNOPOOL_THREADS` if set, else the available cores,
/// never more than the number of shards.
fn worker_threads(shards: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(shards).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub layer: usize,
    pub h: usize,
    pub w: usize,
    /// `(resizer_id, r_h, r_w)` on resizer layers.
    pub resizer: Option<(usize, f64, f64)>,
}

/// What `report` prints, derived only from a metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub final_epoch: usize,
    pub final_gmacs: f64,
    pub best_eval_acc: f64,
    pub best_epoch: usize,
    pub layers: Vec<LayerRow>,
}

fn metrics_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Metrics(format!("line {line}: {msg}"))
}

/// Parses a metrics CSV and checks every resizer row against the output-size
/// rule applied to the preceding layer of the same epoch.
pub fn summarize(csv: &str) -> Result<Summary> {
    let mut lines = csv.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CSV_HEADER => {}
        _ => return Err(Error::Metrics(format!("missing header `{CSV_HEADER}`"))),
    }
    let mut epochs: Vec<(usize, f64, f64, Vec<LayerRow>)> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(metrics_err(lineno, format!("expected 11 fields, found {}", f.len())));
        }
        let num = |j: usize| -> Result<f64> {
            f[j].parse::<f64>().map_err(|_| metrics_err(lineno, format!("bad number `{}`", f[j])))
        };
        let int = |j: usize| -> Result<usize> {
            f[j].parse::<usize>().map_err(|_| metrics_err(lineno, format!("bad integer `{}`", f[j])))
        };
        let epoch = int(0)?;
        let (eval_acc, gmacs) = (num(3)?, num(4)?);
        let resizer = if f[5].is_empty() {
            None
        } else {
            Some((int(5)?, num(6)?, num(7)?))
        };
        let row = LayerRow {
            layer: int(8)?,
            h: int(9)?,
            w: int(10)?,
            resizer,
        };
        match epochs.last_mut() {
            Some(last) if last.0 == epoch => last.3.push(row),
            Some(last) if last.0 > epoch => {
                return Err(metrics_err(lineno, format!("epoch {epoch} after epoch {}", last.0)));
            }
            _ => epochs.push((epoch, eval_acc, gmacs, vec![row])),
        }
    }
    let Some(last) = epochs.last() else {
        return Err(Error::Metrics("no data rows".into()));
    };
    for (epoch, _, _, rows) in &epochs {
        for pair in rows.windows(2) {
            let (prev, cur) = (&pair[0], &pair[1]);
            if let Some((id, r_h, r_w)) = cur.resizer {
                let expected = (discrete_extent(prev.h, r_h), discrete_extent(prev.w, r_w));
                if expected != (cur.h, cur.w) {
                    return Err(Error::Metrics(format!(
                        "epoch {epoch}, resizer {id}: {}x{} from {}x{} with r = ({r_h}, {r_w}) should be {}x{}",
                        cur.h, cur.w, prev.h, prev.w, expected.0, expected.1
                    )));
                }
            }
        }
    }
    let (best_epoch, best_eval_acc) = epochs
        .iter()
        .fold((0, f64::NEG_INFINITY), |best, e| if e.1 > best.1 { (e.0, e.1) } else { best });
    Ok(Summary {
        final_epoch: last.0,
        final_gmacs: last.2,
        best_eval_acc,
        best_epoch,
        layers: last.3.clone(),
    })
}

impl Summary {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "final epoch      {}", self.final_epoch);
        let _ = writeln!(out, "final GMACs      {:.6e}", self.final_gmacs);
        let _ = writeln!(out, "best eval acc    {:.4} (epoch {})", self.best_eval_acc, self.best_epoch);
        out.push_str("layer    h x w      resizer  r_h       r_w\n");
        for l in &self.layers {
            let _ = write!(out, "{:<8} {:<10}", l.layer, format!("{}x{}", l.h, l.w));
            match l.resizer {
                Some((id, r_h, r_w)) => {
                    let _ = writeln!(out, " {id:<8} {r_h:<9.4} {r_w:.4}");
                }
                None => out.push('\n'),
            }
        }
        out
    }

    /// Horizontal bars of `H x W` per layer, labelled with the shape.
    pub fn svg(&self) -> String {
        let bar_h = 18;
        let width = 420.0;
        let label_w = 90.0;
        let max_area = self.layers.iter().map(|l| l.h * l.w).max().unwrap_or(1).max(1) as f64;
        let height = self.layers.len() * (bar_h + 6) + 30;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="monospace" font-size="12">"#,
            width + label_w + 80.0
        );
        let _ = writeln!(s, r#"<text x="4" y="16">feature map H x W, epoch {}</text>"#, self.final_epoch);
        for (i, l) in self.layers.iter().enumerate() {
            let y = 26 + i * (bar_h + 6);
            let len = width * (l.h * l.w) as f64 / max_area;
            let fill = if l.resizer.is_some() { "#d95f02" } else { "#1b9e77" };
            let _ = writeln!(s, r#"<text x="4" y="{}">layer {}</text>"#, y + 13, l.layer);
            let _ = writeln!(
                s,
                r#"<rect x="{label_w}" y="{y}" width="{len:.1}" height="{bar_h}" fill="{fill}"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}">{}x{}</text>"#,
                label_w + len + 4.0,
                y + 13,
                l.h,
                l.w
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Convenience for tests and scripts: summary of a metrics file on disk.
pub fn summarize_file(path: &Path) -> Result<Summary> {
    summarize(&std::fs::read_to_string(path)?)
}
