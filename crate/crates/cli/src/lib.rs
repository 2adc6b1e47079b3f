//! Command-line front end: dataset synthesis, training, prediction,
//! evaluation, the verification suites and switch ablations.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use icvp::config::RunConfig;
use icvp::data::{self, pfm, pnm, StereoPair};
use icvp::head::{compute_metrics, DisparityMap, MetricReport};
use icvp::model::Model;
use icvp::tensor::Tensor;
use icvp::train::{train, EpochLog};
use icvp::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const MANIFEST: &str = "manifest.csv";
pub const LOG_HEADER: &str = "epoch,lr,loss,epe";
pub const ABLATION_HEADER: &str = "combination,seeds,params,epoch_seconds,final_epe";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Verification(_) => EXIT_VERIFY,
        }
    }
}

impl From<icvp::error::Error> for CliError {
    fn from(e: icvp::error::Error) -> Self {
        match e {
            icvp::error::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "icvp", version, about = "Stereo disparity with image-coupled volume propagation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic stereo pairs with exact ground truth.
    Synth(SynthArgs),
    /// Train a model on a synthetic dataset directory.
    Train(TrainArgs),
    /// Predict a disparity map for one stereo pair.
    Predict(PredictArgs),
    /// Compare a predicted disparity map with ground truth.
    Eval(EvalArgs),
    /// Run a verification suite.
    Verify(VerifyArgs),
    /// Train switch combinations and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of pairs; defaults to the config's `samples`.
    #[arg(long)]
    pub count: Option<usize>,
    /// Overrides the config's `data_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Weight file; the epoch log and the config echo are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub png: Option<PathBuf>,
    /// Model config; defaults to the echo written next to the weights.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub thresholds: Vec<f32>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Fusion,
    Gradcheck,
    Shapes,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturbs one image-side weight in every fusion trial.
    #[arg(long, hide = true)]
    pub corrupt_2d_weight: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Comma-separated switch sets such as `gwc+atrous+2d` or `none`;
    /// all eight by default.
    #[arg(long, value_delimiter = ',')]
    pub combinations: Vec<String>,
    /// Training seeds; defaults to the config's `seed`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Verify(a) => cmd_verify(&a),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            Ok(RunConfig::parse(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Path of the epoch log written beside a weight file.
pub fn log_path(weights: &Path) -> PathBuf {
    sibling(weights, "csv")
}

/// Path of the config echo written beside a weight file.
pub fn config_path(weights: &Path) -> PathBuf {
    sibling(weights, "config")
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.synth.seed = seed;
    }
    let count = a.count.unwrap_or(cfg.samples);
    fs::create_dir_all(&a.out_dir)?;
    let mut manifest = String::from("index,seed\n");
    for i in 0..count {
        let sc = cfg.synth_for(i);
        let pair = data::generate_stereogram(&sc)?;
        data::write_sample(&a.out_dir, i, &pair)?;
        let _ = writeln!(manifest, "{i},{}", sc.seed);
    }
    fs::write(a.out_dir.join(MANIFEST), manifest)?;
    fs::write(a.out_dir.join("run.config"), cfg.to_text())?;
    println!("wrote {count} pairs to {}", a.out_dir.display());
    Ok(())
}

/// `(index, seed)` entries of a dataset manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<(usize, u64)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("index,seed") {
        return Err(CliError::Data(format!("{}: unexpected manifest header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || CliError::Data(format!("{}: bad manifest line {l:?}", path.display()));
            let (i, s) = l.split_once(',').ok_or_else(bad)?;
            Ok((i.trim().parse().map_err(|_| bad())?, s.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn load_pairs(dir: &Path) -> Result<Vec<StereoPair>> {
    data::load_dataset(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

/// Splits a dataset into training pairs and the held-out tail.
fn split(mut pairs: Vec<StereoPair>, val_count: usize) -> Result<(Vec<StereoPair>, Vec<StereoPair>)> {
    if val_count >= pairs.len() {
        return Err(CliError::Data(format!(
            "dataset has {} pairs, need more than val_count = {val_count}",
            pairs.len()
        )));
    }
    let val = pairs.split_off(pairs.len() - val_count);
    Ok((pairs, val))
}

struct Outcome {
    logs: Vec<EpochLog>,
    params: usize,
}

fn train_run(cfg: &RunConfig, train_set: &[StereoPair], val_set: &[StereoPair], quiet: bool, mut on_epoch: impl FnMut(&EpochLog) -> Result<()>, weights: Option<&Path>) -> Result<Outcome> {
    let (model, mut store) = Model::build(cfg.model.clone(), cfg.train.seed)?;
    let mut sink: Result<()> = Ok(());
    let logs = train(&model, &mut store, train_set, val_set, &cfg.train, |log| {
        if !quiet {
            eprintln!("epoch {:>3}  lr {:.3e}  loss {:.4}  epe {:.4}  {:.1}s", log.epoch, log.lr, log.loss, log.epe, log.seconds);
        }
        if sink.is_ok() {
            sink = on_epoch(log);
        }
    })?;
    sink?;
    if let Some(path) = weights {
        data::weights::save_weights(&store, path)?;
    }
    Ok(Outcome { logs, params: store.learnable_scalars() })
}

fn log_line(log: &EpochLog) -> String {
    format!("{},{},{},{}", log.epoch, log.lr, log.loss, log.epe)
}

/// Trains and returns the per-epoch log.
pub fn cmd_train(a: &TrainArgs) -> Result<Vec<EpochLog>> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let pairs = load_pairs(&a.data_dir)?;
    let (train_set, val_set) = split(pairs, cfg.train.val_count)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(config_path(&a.out), cfg.to_text())?;
    let mut log = fs::File::create(log_path(&a.out))?;
    writeln!(log, "{LOG_HEADER}")?;
    let outcome = train_run(
        &cfg,
        &train_set,
        &val_set,
        a.quiet,
        |l| {
            writeln!(log, "{}", log_line(l))?;
            Ok(log.flush()?)
        },
        Some(&a.out),
    )?;
    if let Some(last) = outcome.logs.last() {
        println!("trained {} epochs, final loss {:.4}, validation EPE {:.4}", last.epoch, last.loss, last.epe);
    }
    Ok(outcome.logs)
}

/// Rows of an epoch-log CSV.
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(CliError::Data(format!("{}: unexpected log header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || CliError::Data(format!("{}: bad log line {l:?}", path.display()));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
                epe: f[3].parse().map_err(|_| bad())?,
                seconds: 0.0,
            })
        })
        .collect()
}

fn batch_of(image: Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    Ok(Tensor::new(&shape, image.data().to_vec())?)
}

/// 8-bit grayscale rendering with `D - 1` mapped to white.
pub fn disparity_png(map: &DisparityMap, max_disparity: usize) -> Result<Vec<u8>> {
    let scale = 255.0 / (max_disparity.max(2) - 1) as f32;
    let pixels: Vec<u8> = map.values.iter().map(|&d| if d.is_finite() { (d * scale).round().clamp(0.0, 255.0) as u8 } else { 0 }).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, map.width as u32, map.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| CliError::Data(e.to_string()))?;
        w.write_image_data(&pixels).map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(out)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let cfg_file = a.config.clone().unwrap_or_else(|| config_path(&a.weights));
    if !cfg_file.exists() {
        return Err(CliError::Usage(format!("no model config at {}; pass --config", cfg_file.display())));
    }
    let cfg = load_config(Some(&cfg_file))?;
    let (model, mut store) = Model::build(cfg.model.clone(), 0)?;
    data::weights::load_weights(&mut store, &a.weights)?;
    let left = pnm::read_image(&a.left)?;
    let right = pnm::read_image(&a.right)?;
    if left.shape() != right.shape() {
        return Err(CliError::Data(format!("left {:?} and right {:?} differ in size", left.shape(), right.shape())));
    }
    let pred = model.predict(&store, &batch_of(left)?, &batch_of(right)?)?.remove(0);
    pfm::write_pfm(&a.out, &pred)?;
    if let Some(png_path) = &a.png {
        fs::write(png_path, disparity_png(&pred, cfg.model.max_disparity)?)?;
    }
    Ok(())
}

/// Aligned two-column rendering of a metric report.
pub fn format_report(r: &MetricReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8}{:>12}", "pixels", r.pixels);
    let _ = writeln!(out, "{:<8}{:>12.3}", "EPE", r.epe);
    for (t, f) in &r.bad {
        let _ = writeln!(out, "{:<8}{:>12.4}", format!("Bad{t}"), f);
    }
    out
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricReport> {
    let pred = pfm::read_pfm(&a.pred)?;
    let gt = pfm::read_pfm(&a.gt)?;
    let report = compute_metrics(&pred, &gt, &a.thresholds)?;
    print!("{}", format_report(&report));
    if let Some(path) = &a.csv {
        let mut header = String::from("pixels,epe");
        let mut row = format!("{},{}", report.pixels, report.epe);
        for (t, f) in &report.bad {
            let _ = write!(header, ",bad{t}");
            let _ = write!(row, ",{f}");
        }
        fs::write(path, format!("{header}\n{row}\n"))?;
    }
    Ok(report)
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let start = Instant::now();
    let failed = match a.suite {
        Suite::Fusion => {
            if a.trials == 0 {
                return Err(CliError::Usage("--trials must be positive".into()));
            }
            let r = verify::fusion_suite(a.trials, a.seed, a.corrupt_2d_weight)?;
            println!("fusion: {} trials, worst deviation {:.3e} (tolerance {:.0e})", r.trials, r.worst, verify::FUSION_TOLERANCE);
            if let (false, Some(t)) = (r.passed(), &r.worst_trial) {
                println!("worst trial: {t:?}");
            }
            !r.passed()
        }
        Suite::Gradcheck => {
            let checks = verify::gradcheck_suite(a.seed)?;
            for c in &checks {
                println!(
                    "{:<4} {:<40} coords {:>3}/{:<3} skipped {:>3} max abs {:.2e} max rel {:.2e}",
                    if c.passed() { "ok" } else { "FAIL" },
                    c.name,
                    c.coordinates,
                    c.required,
                    c.skipped,
                    c.max_abs_err,
                    c.max_rel_err
                );
            }
            let bad = checks.iter().filter(|c| !c.passed()).count();
            println!("gradcheck: {} checks, {bad} failed", checks.len());
            bad > 0
        }
        Suite::Shapes => {
            let checks = verify::shapes_suite(a.seed)?;
            for c in &checks {
                println!(
                    "{:<4} H=W={:<3} D={:<3} extents {:>2} mismatched {} disparity range [{:.3}, {:.3}]",
                    if c.passed() { "ok" } else { "FAIL" },
                    c.height,
                    c.max_disparity,
                    c.checked,
                    c.mismatches.len(),
                    c.range.0,
                    c.range.1
                );
                for (label, want, got) in &c.mismatches {
                    println!("     {label}: expected {want:?}, got {got:?}");
                }
            }
            checks.iter().any(|c| !c.passed())
        }
    };
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    if failed {
        return Err(CliError::Verification(format!("{:?} suite failed", a.suite).to_lowercase()));
    }
    Ok(())
}

/// Model switches of one ablation entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Switches {
    pub gwc: bool,
    pub atrous: bool,
    pub image_branch: bool,
}

impl Switches {
    pub fn all() -> Vec<Switches> {
        (0..8u8)
            .rev()
            .map(|m| Switches { gwc: m & 4 != 0, atrous: m & 2 != 0, image_branch: m & 1 != 0 })
            .collect()
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Switches { gwc: false, atrous: false, image_branch: false };
        if s.trim() == "none" {
            return Ok(out);
        }
        for part in s.split('+') {
            match part.trim() {
                "gwc" => out.gwc = true,
                "atrous" => out.atrous = true,
                "2d" => out.image_branch = true,
                other => return Err(CliError::Usage(format!("unknown switch {other:?} (use gwc, atrous, 2d or none)"))),
            }
        }
        Ok(out)
    }

    pub fn name(&self) -> String {
        let parts: Vec<&str> = [(self.gwc, "gwc"), (self.atrous, "atrous"), (self.image_branch, "2d")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() { "none".into() } else { parts.join("+") }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub switches: Switches,
    pub seeds: Vec<u64>,
    pub params: usize,
    /// Mean seconds per epoch over all runs.
    pub epoch_seconds: f64,
    /// Final-epoch validation EPE per seed.
    pub final_epe: Vec<f64>,
}

impl AblationRow {
    pub fn mean_epe(&self) -> f64 {
        self.final_epe.iter().sum::<f64>() / self.final_epe.len() as f64
    }
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<18}{:>10}{:>14}{:>12}\n", "combination", "params", "epoch time", "final EPE");
    for r in rows {
        let _ = writeln!(out, "{:<18}{:>10}{:>13.2}s{:>12.4}", r.switches.name(), r.params, r.epoch_seconds, r.mean_epe());
    }
    out
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Vec<AblationRow>> {
    let base = load_config(a.config.as_deref())?;
    let combos = if a.combinations.is_empty() {
        Switches::all()
    } else {
        a.combinations.iter().map(|c| Switches::parse(c)).collect::<Result<_>>()?
    };
    let seeds = if a.seeds.is_empty() { vec![base.train.seed] } else { a.seeds.clone() };
    let pairs = load_pairs(&a.data_dir)?;
    let (train_set, val_set) = split(pairs, base.train.val_count)?;
    if val_set.is_empty() {
        return Err(CliError::Usage("ablation needs val_count > 0".into()));
    }
    let mut rows = Vec::new();
    for sw in combos {
        let mut cfg = base.clone();
        cfg.model.gwc = sw.gwc;
        cfg.model.atrous = sw.atrous;
        cfg.model.image_branch = sw.image_branch;
        cfg.validate()?;
        let mut row = AblationRow { switches: sw, seeds: seeds.clone(), params: 0, epoch_seconds: 0.0, final_epe: Vec::new() };
        let mut epochs = 0usize;
        for &seed in &seeds {
            cfg.train.seed = seed;
            if !a.quiet {
                eprintln!("{} seed {seed}", sw.name());
            }
            let o = train_run(&cfg, &train_set, &val_set, a.quiet, |_| Ok(()), None)?;
            row.params = o.params;
            row.epoch_seconds += o.logs.iter().map(|l| l.seconds).sum::<f64>();
            epochs += o.logs.len();
            row.final_epe.push(o.logs.last().map_or(f64::NAN, |l| l.epe));
        }
        row.epoch_seconds /= epochs.max(1) as f64;
        rows.push(row);
    }
    print!("{}", format_ablation(&rows));
    if let Some(path) = &a.csv {
        let mut text = format!("{ABLATION_HEADER}\n");
        for r in &rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let epes: Vec<String> = r.final_epe.iter().map(f64::to_string).collect();
            let _ = writeln!(text, "{},{},{},{},{}", r.switches.name(), seeds.join(";"), r.params, r.epoch_seconds, epes.join(";"));
        }
        fs::write(path, text)?;
    }
    Ok(rows)
}
