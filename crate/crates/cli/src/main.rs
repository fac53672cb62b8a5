//! `cso-unmix`: dataset generation, the ISTA baseline, network training,
//! evaluation and report tables.
//!
//! Exit status is 0 on success, 1 for invalid input and 2 for runtime or
//! numeric failures. Errors go to stderr as a single `error: ...` line.

mod config;
mod render;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};
use cso_unmix::dista::{train, Checkpoint, Model, TrainStatus};
use cso_unmix::imaging::{build_steering_matrix, SteeringMatrix, SubPixelGrid};
use cso_unmix::metrics::{psnr, ssim, EvalReport, DEFAULT_PEAK, DEFAULT_THRESHOLD};
use cso_unmix::pipeline::{
    ista_reconstruct, linear_reconstruct, model_reconstruct, score, select_lambda,
};
use cso_unmix::scenegen::{generate_dataset, Dataset, Record, SparseGridImage, Split};

use config::FileConfig;

/// Bad input: flags, config values or missing files. Exits with status 1.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "cso-unmix", version, about = "Closely-spaced point target unmixing")]
struct Cli {
    /// TOML or JSON file with `sensor`, `dataset`, `model` and `solver` tables.
    /// Flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and print split counts and checksum.
    Gen(GenArgs),
    /// Run the ISTA baseline on the test split.
    Solve(SolveArgs),
    /// Train the unrolled network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Tabulate one or more report files.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    min_separation: Option<f64>,
    #[arg(long)]
    grid_factor: Option<usize>,
    #[arg(long)]
    sigma_psf: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// 5000 / 500 / 500 split instead of 0.8 / 0.1 / 0.1.
    #[arg(long)]
    desk_scale: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Write PNG triplets (measurement, reconstruction, truth) for the first N test samples.
    #[arg(long, default_value_t = 0)]
    render: usize,
    /// Directory for renders; defaults to `renders/` next to the report.
    #[arg(long)]
    render_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Multiplier of max|G^T z| giving each sample's lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Skip the validation search; requires --lambda.
    #[arg(long)]
    no_grid: bool,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    stop_tol: Option<f64>,
    /// Use only the first N validation samples for the lambda search.
    #[arg(long)]
    search_samples: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[command(flatten)]
    render: RenderArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// CSV trace path; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Score the checkpoint's linear initializer alone.
    #[arg(long)]
    linear: bool,
    /// Per-sample CSV with PSNR, SSIM and detection counts.
    #[arg(long)]
    per_sample: Option<PathBuf>,
    #[command(flatten)]
    render: RenderArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Emit CSV instead of an aligned table.
    #[arg(long)]
    csv: bool,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<cso_unmix::Error>() {
            return match err {
                cso_unmix::Error::Config(_) | cso_unmix::Error::Domain(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CSO_UNMIX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| invalid(format!("CSO_UNMIX_THREADS={v:?} must be a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Gen(a) => cmd_gen(&file, a),
        Command::Solve(a) => cmd_solve(&file, a),
        Command::Train(a) => cmd_train(&file, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_gen(file: &FileConfig, a: GenArgs) -> Result<()> {
    let mut sensor = file.sensor()?;
    if let Some(v) = a.sigma_psf {
        sensor.sigma_psf = v;
    }
    if let Some(v) = a.noise_sigma {
        sensor.noise_sigma = v;
    }
    let mut ds = file.dataset(&sensor)?;
    if a.desk_scale {
        ds.split_fractions = cso_unmix::scenegen::DatasetConfig::desk_scale().split_fractions;
    }
    if let Some(v) = a.samples {
        ds.num_samples = v;
    }
    if let Some(v) = a.seed {
        ds.rng_seed = v;
    }
    if let Some(v) = a.min_separation {
        ds.min_separation = v;
    }
    if let Some(v) = a.grid_factor {
        ds.grid_factor = v;
    }
    let manifest = generate_dataset(&ds, &sensor, &a.out)?;
    let c = manifest.counts;
    println!("train {} val {} test {}", c.train, c.val, c.test);
    println!("checksum {}", manifest.checksum);
    Ok(())
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(invalid(format!("no dataset at {}", dir.display())));
    }
    Ok(Dataset::open(dir)?)
}

fn steering_for(ds: &Dataset) -> Result<SteeringMatrix> {
    let grid = SubPixelGrid::new(ds.sensor(), ds.grid_factor())?;
    Ok(build_steering_matrix(&grid, ds.sensor())?)
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_solve(file: &FileConfig, a: SolveArgs) -> Result<()> {
    let ds = open_dataset(&a.data)?;
    let steering = steering_for(&ds)?;
    let mut settings = file.solver.ista_settings();
    if let Some(v) = a.max_iters {
        settings.max_iters = v;
    }
    if let Some(v) = a.stop_tol {
        settings.stop_tol = v;
    }
    if settings.max_iters == 0 {
        return Err(invalid("--max-iters must be >= 1"));
    }
    let lambda = a.lambda.or(file.solver.lambda);
    if let Some(l) = lambda {
        if !(l.is_finite() && l >= 0.0) {
            return Err(invalid(format!("lambda {l} must be >= 0")));
        }
    }
    let pixel_width = ds.sensor().pixel_width;
    let factor = if a.no_grid {
        lambda.ok_or_else(|| invalid("--no-grid requires --lambda"))?
    } else {
        let mut val = ds.load(Split::Val)?;
        if let Some(n) = a.search_samples {
            val.truncate(n);
        }
        let search = select_lambda(&val, &steering, settings, a.threshold, pixel_width)?;
        for (f, m) in &search.scores {
            println!("lambda {f} val_cso_map {m}");
        }
        search.factor
    };
    println!("selected lambda {factor}");
    let test = ds.load(Split::Test)?;
    let preds = ista_reconstruct(&test, &steering, factor, settings)?;
    let report = score(&test, &preds, a.threshold, pixel_width)?;
    write_report(&a.out, &report)?;
    render::write_triplets(&a.render, &a.out, &test, &preds)?;
    println!("cso_map {}", report.cso_map);
    Ok(())
}

fn cmd_train(file: &FileConfig, a: TrainArgs) -> Result<()> {
    let ds = open_dataset(&a.data)?;
    let mut cfg = file.model()?;
    cfg.grid_factor = ds.grid_factor();
    if let Some(v) = a.stages {
        cfg.num_stages = v;
    }
    if let Some(v) = a.channels {
        cfg.channels = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.seed {
        cfg.rng_seed = v;
    }
    cfg.validate()?;
    let steering = steering_for(&ds)?;
    let outcome = train(&ds, &cfg, &steering)?;
    outcome.checkpoint.save(&a.out)?;
    let trace_path = a.trace.unwrap_or_else(|| a.out.with_extension("csv"));
    let mut w = csv::Writer::from_path(&trace_path).with_context(|| format!("writing {}", trace_path.display()))?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for r in &outcome.checkpoint.trace {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string()])?;
    }
    w.flush()?;
    match outcome.status {
        TrainStatus::Completed => {
            println!("checkpoint {}", a.out.display());
            Ok(())
        }
        TrainStatus::Aborted { epoch, batch, reason } => anyhow::bail!(
            "training aborted at epoch {epoch}, batch {batch}: {reason}; last good parameters saved to {}",
            a.out.display()
        ),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if !a.checkpoint.is_file() {
        return Err(invalid(format!("no checkpoint at {}", a.checkpoint.display())));
    }
    let ds = open_dataset(&a.data)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let steering = steering_for(&ds)?;
    let test = ds.load(Split::Test)?;
    let preds = if a.linear {
        linear_reconstruct(&test, &ckpt.q_init)?
    } else {
        let mut model = Model::new(ckpt, &steering)?;
        model_reconstruct(&test, &mut model)?
    };
    let pixel_width = ds.sensor().pixel_width;
    let report = score(&test, &preds, a.threshold, pixel_width)?;
    write_report(&a.out, &report)?;
    if let Some(path) = &a.per_sample {
        write_per_sample(path, &test, &preds, a.threshold, pixel_width)?;
    }
    render::write_triplets(&a.render, &a.out, &test, &preds)?;
    println!("cso_map {}", report.cso_map);
    Ok(())
}

fn write_per_sample(
    path: &Path,
    records: &[Record],
    preds: &[SparseGridImage],
    threshold: f64,
    pixel_width: f64,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["index", "targets", "detections", "psnr", "ssim"])?;
    for (i, (r, p)) in records.iter().zip(preds).enumerate() {
        let dets = cso_unmix::metrics::extract_targets(p, threshold, pixel_width)?;
        w.write_record([
            i.to_string(),
            r.targets.len().to_string(),
            dets.len().to_string(),
            psnr(p, &r.truth, DEFAULT_PEAK)?.to_string(),
            ssim(p, &r.truth, DEFAULT_PEAK)?.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const REPORT_COLUMNS: [&str; 9] = ["method", "cso_map", "ap_05", "ap_10", "ap_15", "ap_20", "ap_25", "psnr", "ssim"];

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn report_rows(paths: &[PathBuf]) -> Result<Vec<(String, EvalReport)>> {
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            Ok((name, read_report(p)?))
        })
        .collect()
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let rows = report_rows(&a.reports)?;
    let mut out: Vec<u8> = Vec::new();
    if a.csv {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(REPORT_COLUMNS)?;
        for (name, r) in &rows {
            let mut rec = vec![name.clone(), r.cso_map.to_string()];
            rec.extend(r.aps().iter().map(f64::to_string));
            rec.push(r.psnr_mean.to_string());
            rec.push(r.ssim_mean.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        drop(w);
    } else {
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
        write!(out, "{:<width$}", REPORT_COLUMNS[0])?;
        for c in &REPORT_COLUMNS[1..] {
            write!(out, " {c:>8}")?;
        }
        writeln!(out)?;
        for (name, r) in &rows {
            write!(out, "{name:<width$} {:>8.4}", r.cso_map)?;
            for ap in r.aps() {
                write!(out, " {ap:>8.4}")?;
            }
            writeln!(out, " {:>8.3} {:>8.4}", r.psnr_mean, r.ssim_mean)?;
        }
    }
    match &a.out {
        Some(p) => fs::write(p, &out).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(&out)?,
    }
    Ok(())
}
