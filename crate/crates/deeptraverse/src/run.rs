//! The four commands. Each returns `Ok` on success; the binary maps errors
//! to exit codes.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use deeptraverse_core::accounting::{cost_report, emit_cost_table, CostTable};
use deeptraverse_core::autograd::OpKind;
use deeptraverse_core::gradcheck::suite::{run_suite, SuiteConfig};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use crate::checkpoint::{Checkpoint, MetricRow};
use crate::config::{ConfigFile, Overrides, RunConfig};
use crate::error::{AppError, Result};
use crate::session::{load_data, model_from_checkpoint, Data, Session};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,test_loss,test_top1,test_top5";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const COST_METHOD: &str = "DeepTraverse";

pub fn timestamp() -> String {
    OffsetDateTime::now_utc().format(&Rfc3339).unwrap_or_else(|_| "unknown".into())
}

pub fn metrics_line(r: &MetricRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.epoch, r.lr, r.train_loss, r.train_acc, r.test_loss, r.test_top1, r.test_top5
    )
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ")
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub overrides: Overrides,
}

/// Outcome of a completed training run.
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub history: Vec<MetricRow>,
}

fn default_run_dir(run: &RunConfig) -> PathBuf {
    let stamp = OffsetDateTime::now_utc().unix_timestamp_nanos();
    PathBuf::from("runs").join(format!("{}-seed{}-{stamp}", &run.content_hash()[..12], run.seed))
}

fn create_run_dir(dir: &Path) -> Result<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    match fs::create_dir(dir) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(AppError::Config(format!(
            "run directory {} already exists; every run needs a fresh directory",
            dir.display()
        ))),
        Err(e) => Err(AppError::io(dir, e)),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| AppError::io(path, e))
}

fn manifest(run: &RunConfig, args: &TrainArgs, data: &Data, dir: &Path, started: &str) -> String {
    let mut m = String::new();
    let _ = writeln!(m, "command: train");
    let _ = writeln!(m, "started: {started}");
    let _ = writeln!(m, "seed: {}", run.seed);
    let _ = writeln!(m, "threads: 1");
    let _ = writeln!(m, "config_sha256: {}", run.content_hash());
    let path = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
    let _ = writeln!(m, "config_path: {}", path(&args.config));
    let _ = writeln!(m, "resumed_from: {}", path(&args.resume));
    let _ = writeln!(m, "dataset: {:?}", run.data.dataset);
    let _ = writeln!(m, "data_dir: {}", path(&data.dir));
    let _ = writeln!(m, "train_images: {}", data.train.len());
    let _ = writeln!(m, "test_images: {}", data.test.len());
    if let Some(n) = &data.normalization {
        let _ = writeln!(m, "normalization_mean: {}", fmt_list(&n.mean));
        let _ = writeln!(m, "normalization_std: {}", fmt_list(&n.std));
    }
    let _ = writeln!(m, "output_dir: {}", dir.display());
    let _ = writeln!(m, "\n# resolved configuration\n{}", run.to_toml());
    m
}

/// Trains into a fresh run directory: manifest.txt, cost.csv, metrics.csv,
/// last.ckpt after every epoch and best.ckpt whenever test top-1 improves.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let started = timestamp();
    let (mut session, prior) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut file = ckpt.meta.config.clone();
            file.apply(&args.overrides);
            let mut s = Session::resume(&ckpt, path)?;
            // only the epoch budget and the data location may change on resume
            let resolved = file.resolve()?;
            s.run.optim.epochs = resolved.optim.epochs;
            s.optim.config.epochs = resolved.optim.epochs;
            s.run.data.dir = resolved.data.dir;
            (s, Some(ckpt))
        }
        None => {
            let mut file = match &args.config {
                Some(p) => ConfigFile::load(p)?,
                None => ConfigFile::defaults(),
            };
            file.apply(&args.overrides);
            (Session::new(file.resolve()?)?, None)
        }
    };
    let stored = prior.as_ref().and_then(|c| c.meta.normalization.clone());
    let data = load_data(&session.run.data, stored.as_ref())?;
    let [c, h, w] = data.train.image_shape();
    if c != session.run.model.input_channels {
        return Err(AppError::Config(format!(
            "dataset images have {c} channels, model.input_channels is {}",
            session.run.model.input_channels
        )));
    }
    let dir = args.out.clone().unwrap_or_else(|| default_run_dir(&session.run));
    create_run_dir(&dir)?;
    write_file(&dir.join("manifest.txt"), &manifest(&session.run, args, &data, &dir, &started))?;
    let report = cost_report(&session.run.model, (h, w), COST_METHOD)?;
    write_file(&dir.join("cost.csv"), &emit_cost_table(&[report]).csv)?;

    let metrics_path = dir.join("metrics.csv");
    let mut metrics = File::create(&metrics_path).map_err(|e| AppError::io(&metrics_path, e))?;
    let mut lines = format!("{METRICS_HEADER}\n");
    for r in &session.history {
        lines.push_str(&metrics_line(r));
        lines.push('\n');
    }
    metrics.write_all(lines.as_bytes()).map_err(|e| AppError::io(&metrics_path, e))?;

    let last = dir.join("last.ckpt");
    let best = dir.join("best.ckpt");
    let mut best_top1 = session.history.iter().map(|r| r.test_top1).fold(f64::NEG_INFINITY, f64::max);
    let mut saved_any = false;
    while !session.finished() {
        let row = match session.epoch(&data) {
            Ok(row) => row,
            Err(AppError::Core(deeptraverse_core::Error::Numeric(msg))) => {
                let last_good = if saved_any { last.display().to_string() } else { "none".into() };
                return Err(AppError::Core(deeptraverse_core::Error::Numeric(format!(
                    "{msg}; last good checkpoint: {last_good}"
                ))));
            }
            Err(e) => return Err(e),
        };
        println!(
            "epoch {:>3}  lr {:.5}  train loss {:.4} acc {:.2}%  test loss {:.4} top1 {:.2}% top5 {:.2}%",
            row.epoch,
            row.lr,
            row.train_loss,
            100.0 * row.train_acc,
            row.test_loss,
            100.0 * row.test_top1,
            100.0 * row.test_top5
        );
        writeln!(metrics, "{}", metrics_line(&row)).map_err(|e| AppError::io(&metrics_path, e))?;
        let ckpt = session.checkpoint(data.normalization.as_ref());
        ckpt.save(&last)?;
        saved_any = true;
        if row.test_top1 > best_top1 {
            best_top1 = row.test_top1;
            ckpt.save(&best)?;
        }
    }
    let mut m = OpenOptions::new().append(true).open(dir.join("manifest.txt")).map_err(|e| AppError::io(&dir, e))?;
    writeln!(m, "finished: {}", timestamp()).map_err(|e| AppError::io(&dir, e))?;
    Ok(TrainOutcome { run_dir: dir, history: session.history })
}

pub struct EvalOutcome {
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
    pub count: usize,
}

impl EvalOutcome {
    /// `RESULT top1=<%> top5=<%> loss=<mean cross-entropy>`.
    pub fn result_line(&self) -> String {
        format!("RESULT top1={:.4} top5={:.4} loss={:.6}", 100.0 * self.top1, 100.0 * self.top5, self.loss)
    }
}

/// Test-split metrics of a checkpoint, using the normalisation it was trained with.
pub fn cmd_eval(checkpoint: &Path, data_dir: Option<PathBuf>, test_subset: Option<usize>) -> Result<EvalOutcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (mut run, model) = model_from_checkpoint(&ckpt, checkpoint)?;
    if data_dir.is_some() {
        run.data.dir = data_dir;
    }
    run.data.test_subset = test_subset.or(run.data.test_subset);
    let data = load_data(&run.data, ckpt.meta.normalization.as_ref())?;
    let m = deeptraverse_core::train::evaluate(&model, &data.test, run.eval_batch_size)?;
    Ok(EvalOutcome { top1: m.top1, top5: m.top5, loss: m.loss, count: m.count })
}

/// The cost table of the configured network at `h × w`.
pub fn cmd_count(config: Option<&Path>, overrides: &Overrides, hw: (usize, usize)) -> Result<CostTable> {
    let mut file = match config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::defaults(),
    };
    file.apply(overrides);
    let run = file.resolve()?;
    let report = cost_report(&run.model, hw, COST_METHOD)?;
    Ok(emit_cost_table(&[report]))
}

pub struct GradcheckOutcome {
    pub lines: Vec<String>,
    pub passed: bool,
}

/// Finite-difference checks of the blocks, the tiny network and the
/// configured network. `fault` corrupts one backward rule to show the
/// checks notice.
pub fn cmd_gradcheck(config: Option<&Path>, seed: u64, fault: Option<OpKind>) -> Result<GradcheckOutcome> {
    let file = match config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::defaults(),
    };
    let run = file.resolve()?;
    let cfg = SuiteConfig { seed, network: run.model, fault, ..SuiteConfig::default() };
    let results = run_suite(&cfg)?;
    let mut lines = Vec::new();
    let mut passed = true;
    for r in &results {
        let ok = r.report.passes(GRADCHECK_TOLERANCE);
        passed &= ok;
        lines.push(format!(
            "{:<28} max rel err {:.3e}  coords {:>6}  one-sided {:>3}  {}",
            r.component,
            r.report.max_rel_err,
            r.report.coordinates(),
            r.report.one_sided(),
            if ok { "ok" } else { "FAIL" }
        ));
    }
    Ok(GradcheckOutcome { lines, passed })
}
