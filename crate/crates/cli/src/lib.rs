//! Command-line front end: synthetic generation, training, evaluation,
//! gradient checks and r₀ sweeps as reproducible, seeded runs.
//!
//! Every command resolves a [`RunConfig`] and writes it to `config.txt` in
//! its output directory. Exit codes: 0 success, 1 validation error,
//! 2 numerical failure.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use lsepool_core::data::{generate_split, ingest, write_dataset, write_gray, Dataset, Image, Split};
use lsepool_core::gradcheck::{run_suite, CheckSettings, SuiteConfig, SuiteReport};
use lsepool_core::metrics::{evaluate, MetricsReport};
use lsepool_core::model::{load_checkpoint, save_checkpoint, Model};
use lsepool_core::train::{history_csv, predict_all, train_with, EpochRecord};
use lsepool_core::Scalar;

pub use config::{EvalSplit, Precision, RunConfig, RUN_KEYS};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SALIENCY_DIR: &str = "saliency";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("output directory {} is not empty (pass --force to write into it)", .0.display())]
    OutputExists(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] lsepool_core::Error),

    #[error("AUC is undefined: {0}; the remaining metrics were written")]
    UndefinedAuc(String),

    #[error("gradient check failed for: {}", .0.join(", "))]
    GradcheckFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::GradcheckFailed(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "lsepool",
    version,
    about = "LSE-LBA pooling and multi-resolution MIL saliency at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for initialization, shuffling, augmentation and generation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/val/test datasets.
    Gen(Common),
    /// Train a model; writes the best checkpoint and the epoch history.
    Train(Common),
    /// Score a checkpoint and export saliency maps.
    Eval(Common),
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of random seeds per op.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Test hook: perturb one op's analytic gradient.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train one model per r₀ on identical data and compare them.
    #[command(name = "sweep-r0")]
    SweepR0 {
        #[command(flatten)]
        common: Common,
        /// Runs to train concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Parses `args` (including the program name), runs the command and maps
/// the outcome to an exit code.
pub fn run<I, A>(args: I) -> ExitCode
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(&cli.command, &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn dispatch(command: &Command, log: &mut dyn Write) -> Result<()> {
    match command {
        Command::Gen(c) => {
            let cfg = resolve(c)?;
            let out = output_dir(c)?;
            cmd_gen(&cfg, &out, log).map(|_| ())
        }
        Command::Train(c) => {
            let cfg = resolve(c)?;
            check_inputs(&cfg, false)?;
            let out = output_dir(c)?;
            cmd_train(&cfg, &out, log).map(|_| ())
        }
        Command::Eval(c) => {
            let cfg = resolve(c)?;
            check_inputs(&cfg, true)?;
            let out = output_dir(c)?;
            cmd_eval(&cfg, &out, log).map(|_| ())
        }
        Command::Gradcheck { common, seeds, corrupt } => {
            let out = match &common.out {
                Some(_) => Some(output_dir(common)?),
                None => None,
            };
            cmd_gradcheck(*seeds, corrupt.clone(), out.as_deref(), log).map(|_| ())
        }
        Command::SweepR0 { common, jobs } => {
            let cfg = resolve(common)?;
            check_inputs(&cfg, false)?;
            let out = output_dir(common)?;
            cmd_sweep_r0(&cfg, &out, *jobs, log).map(|_| ())
        }
    }
}

/// Defaults, then `--config`, then `--seed`, then `--set` overrides.
pub fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        cfg.apply_text(&text, path)?;
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    for s in &common.set {
        cfg.apply_override(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(common: &Common) -> Result<PathBuf> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| CliError::Config("--out DIR is required".into()))?;
    prepare_output(&out, common.force)?;
    Ok(out)
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Config(format!(
                "{} exists and is not a directory",
                dir.display()
            )));
        }
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty && !force {
            return Err(CliError::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}

fn to_split(s: EvalSplit) -> Split {
    match s {
        EvalSplit::Train => Split::Train,
        EvalSplit::Val => Split::Val,
        EvalSplit::Test => Split::Test,
    }
}

/// Validates every input path a command will read, before any compute.
pub fn check_inputs(cfg: &RunConfig, eval: bool) -> Result<()> {
    if let Some(root) = &cfg.data {
        let splits = if eval {
            vec![to_split(cfg.eval_split)]
        } else {
            vec![Split::Train, Split::Val, Split::Test]
        };
        for s in splits {
            let dir = split_dir(root, s);
            let labels = dir.join(lsepool_core::data::LABELS_FILE);
            if !labels.is_file() {
                return Err(CliError::Config(format!(
                    "dataset split not found: {}",
                    labels.display()
                )));
            }
        }
    }
    if eval {
        match &cfg.checkpoint {
            Some(p) if p.is_file() => {}
            Some(p) => return Err(CliError::Config(format!("checkpoint not found: {}", p.display()))),
            None => return Err(CliError::Config("eval needs `checkpoint = PATH`".into())),
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_file(&out.join(CONFIG_FILE), &cfg.to_text())
}

fn count_line(split: &str, ds: &Dataset) -> String {
    let counts: Vec<String> = ds
        .class_names
        .iter()
        .zip(ds.positive_counts())
        .map(|(name, n)| format!("{name}={n}"))
        .collect();
    format!("{split}: {} samples, positives {}", ds.len(), counts.join(" "))
}

/// Loads one split, from disk when `data` is set, otherwise generated.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    match &cfg.data {
        Some(root) => Ok(ingest(&split_dir(root, split), cfg.model.input_size)?),
        None => {
            let n = match split {
                Split::Train => cfg.n_train,
                Split::Val => cfg.n_val,
                Split::Test => cfg.n_test,
            };
            if n == 0 {
                return Err(CliError::Config(format!("n_{} must be >= 1", split.name())));
            }
            Ok(generate_split(&cfg.synthetic, split, n)?)
        }
    }
}

/// Writes every split with a non-zero size under `out/<split>/`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<Vec<Dataset>> {
    let mut written = Vec::new();
    for (split, n) in [
        (Split::Train, cfg.n_train),
        (Split::Val, cfg.n_val),
        (Split::Test, cfg.n_test),
    ] {
        if n == 0 {
            continue;
        }
        let ds = generate_split(&cfg.synthetic, split, n)?;
        write_dataset(&split_dir(out, split), &ds)?;
        let _ = writeln!(log, "{}", count_line(split.name(), &ds));
        written.push(ds);
    }
    write_config(cfg, out)?;
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Trains on the train split with early stopping on the val split.
pub fn cmd_train(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<TrainSummary> {
    let train_set = load_split(cfg, Split::Train)?;
    let val_set = load_split(cfg, Split::Val)?;
    train_on(cfg, &train_set, &val_set, out, log)
}

fn train_on(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    out: &Path,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    write_config(cfg, out)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, train_set, val_set, out, log),
        Precision::F64 => train_typed::<f64>(cfg, train_set, val_set, out, log),
    }
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    out: &Path,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    let model = Model::<T>::build(cfg.model.clone())?;
    let _ = writeln!(log, "{} parameters", model.param_count());
    let outcome = train_with(model, train_set, val_set, &cfg.train, &mut |r, _| {
        let r_eff = r.r_eff.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            log,
            "epoch {:>3}  loss {:.5}  val AUC {:.4}  r_eff {r_eff}",
            r.epoch, r.train_loss, r.val_mean_auc
        );
    })?;
    save_checkpoint(&outcome.model, &out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(HISTORY_FILE), &history_csv(&outcome.history))?;
    let _ = writeln!(log, "best epoch {} after {} steps", outcome.best_epoch, outcome.steps);
    Ok(TrainSummary {
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        steps: outcome.steps,
    })
}

/// Scores `cfg.checkpoint` on `cfg.eval_split`; writes the metrics CSV and
/// one `<sample>_<class>.pgm` per sample and class.
///
/// If some class has an undefined AUC the other metrics are still written
/// and the returned error names the class.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<MetricsReport> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("eval needs `checkpoint = PATH`".into()))?;
    write_config(cfg, out)?;
    let report = match cfg.precision {
        Precision::F32 => eval_typed(&load_checkpoint::<f32>(path)?, cfg, out)?,
        Precision::F64 => eval_typed(&load_checkpoint::<f64>(path)?, cfg, out)?,
    };
    write_file(&out.join(METRICS_FILE), &report.to_csv())?;
    for c in &report.classes {
        let auc = match &c.auc {
            Ok(m) => format!("{:.4}", m.value),
            Err(_) => "undefined".into(),
        };
        let dice = c.dice.map(|m| format!("{:.4}", m.value)).unwrap_or_else(|| "-".into());
        let _ = writeln!(log, "{}: AUC {auc}  DICE {dice}", c.name);
    }
    let undefined: Vec<String> = report
        .classes
        .iter()
        .filter_map(|c| c.auc.as_ref().err().map(|e| format!("class `{}`: {e}", c.name)))
        .collect();
    if !undefined.is_empty() {
        return Err(CliError::UndefinedAuc(undefined.join("; ")));
    }
    Ok(report)
}

fn eval_typed<T: Scalar>(model: &Model<T>, cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    let mcfg = model.config();
    if cfg.data.is_none() && cfg.synthetic.image_size != mcfg.input_size {
        return Err(CliError::Config(format!(
            "synthetic image_size {} does not match the checkpoint's input_size {}",
            cfg.synthetic.image_size, mcfg.input_size
        )));
    }
    let mut eval_cfg = cfg.clone();
    eval_cfg.model.input_size = mcfg.input_size;
    let ds = load_split(&eval_cfg, to_split(cfg.eval_split))?;
    if ds.num_classes() != mcfg.num_classes {
        return Err(CliError::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            mcfg.num_classes,
            ds.num_classes()
        )));
    }
    let preds = predict_all(model, &ds, 32)?;
    let dir = out.join(SALIENCY_DIR);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (s, p) in ds.samples.iter().zip(&preds) {
        let side = p.saliency.side();
        for (k, name) in ds.class_names.iter().enumerate() {
            let plane: Vec<f64> = p.saliency.class(k).iter().map(|v| v.f64()).collect();
            let img = Image::from_vec(side, side, plane)?;
            write_gray(&dir.join(format!("{}_{name}.pgm", s.name)), &img)?;
        }
    }
    Ok(evaluate(&ds, &preds, &cfg.taus, &cfg.alphas)?)
}

/// Runs the gradient suite, prints the per-op report and fails on any
/// op above tolerance.
pub fn cmd_gradcheck(
    seeds: u64,
    corrupt: Option<String>,
    out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<SuiteReport> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be >= 1".into()));
    }
    let config = SuiteConfig {
        seeds: (0..seeds).collect(),
        settings: CheckSettings::default(),
        corrupt,
    };
    let report = run_suite(&config)?;
    let text = report.render();
    let _ = write!(log, "{text}");
    if let Some(dir) = out {
        write_file(&dir.join(GRADCHECK_FILE), &text)?;
    }
    if !report.passed() {
        return Err(CliError::GradcheckFailed(
            report.failures().iter().map(|s| s.to_string()).collect(),
        ));
    }
    Ok(report)
}

/// One row of the sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub r0: f64,
    pub class: String,
    /// `None` when undefined on the test split.
    pub auc: Option<f64>,
    pub dice: Option<f64>,
    pub activated_area: Option<f64>,
    pub positives: usize,
    pub best_epoch: usize,
    pub steps: usize,
}

pub const SWEEP_HEADER: &str = "r0,class,auc,dice,activated_area,positives,best_epoch,steps";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.r0,
            r.class,
            opt(r.auc),
            opt(r.dice),
            opt(r.activated_area),
            r.positives,
            r.best_epoch,
            r.steps
        );
    }
    out
}

/// Directory name of one sweep run.
pub fn sweep_run_dir(out: &Path, r0: f64) -> PathBuf {
    out.join(format!("r0_{r0}"))
}

/// Trains one model per r₀ (identical seed and data) into `out/r0_<v>/`,
/// scores each on the test split and writes `sweep.csv`. Up to `jobs` runs
/// train concurrently; results do not depend on `jobs`.
pub fn cmd_sweep_r0(cfg: &RunConfig, out: &Path, jobs: usize, log: &mut dyn Write) -> Result<Vec<SweepRow>> {
    if jobs == 0 {
        return Err(CliError::Config("--jobs must be >= 1".into()));
    }
    write_config(cfg, out)?;
    let train_set = load_split(cfg, Split::Train)?;
    let val_set = load_split(cfg, Split::Val)?;
    let test_set = load_split(cfg, Split::Test)?;
    let runs: Vec<RunConfig> = cfg
        .r0_list
        .iter()
        .map(|&r0| {
            let mut c = cfg.clone();
            c.model.r0 = r0;
            c
        })
        .collect();
    for c in &runs {
        prepare_output(&sweep_run_dir(out, c.model.r0), true)?;
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Vec<SweepRow>>>>> = Mutex::new(runs.iter().map(|_| None).collect());
    let log_lines: Mutex<Vec<String>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(runs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                let dir = sweep_run_dir(out, run.model.r0);
                let mut buf = Vec::new();
                let res = sweep_one(run, &train_set, &val_set, &test_set, &dir, &mut buf);
                log_lines.lock().unwrap().push(format!(
                    "r0 = {}: {}",
                    run.model.r0,
                    String::from_utf8_lossy(&buf).lines().last().unwrap_or("")
                ));
                results.lock().unwrap()[i] = Some(res);
            });
        }
    });
    for line in log_lines.into_inner().unwrap() {
        let _ = writeln!(log, "{line}");
    }
    let mut rows = Vec::new();
    for res in results.into_inner().unwrap() {
        rows.extend(res.expect("every sweep run is scheduled")?);
    }
    write_file(&out.join(SWEEP_FILE), &sweep_csv(&rows))?;
    Ok(rows)
}

fn sweep_one(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    dir: &Path,
    log: &mut dyn Write,
) -> Result<Vec<SweepRow>> {
    let summary = train_on(cfg, train_set, val_set, dir, log)?;
    let report = match cfg.precision {
        Precision::F32 => score::<f32>(dir, test_set, cfg)?,
        Precision::F64 => score::<f64>(dir, test_set, cfg)?,
    };
    write_file(&dir.join(METRICS_FILE), &report.to_csv())?;
    let positives = test_set.positive_counts();
    Ok(report
        .classes
        .iter()
        .zip(positives)
        .map(|(c, positives)| SweepRow {
            r0: cfg.model.r0,
            class: c.name.clone(),
            auc: c.auc.as_ref().ok().map(|m| m.value),
            dice: c.dice.map(|m| m.value),
            activated_area: c.activated_area.map(|m| m.value),
            positives,
            best_epoch: summary.best_epoch,
            steps: summary.steps,
        })
        .collect())
}

fn score<T: Scalar>(dir: &Path, test_set: &Dataset, cfg: &RunConfig) -> Result<MetricsReport> {
    let model = load_checkpoint::<T>(&dir.join(CHECKPOINT_FILE))?;
    let preds = predict_all(&model, test_set, 32)?;
    Ok(evaluate(test_set, &preds, &cfg.taus, &cfg.alphas)?)
}
