//! The `cgmwd` command line.
//!
//! Every option can also come from a flat `key = value` config file given by
//! `--config`; keys are the long flag names without the leading dashes. Flags win
//! over the file. Exit codes: 0 success, 1 invalid arguments or config,
//! 2 failure while running.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::eval::{self, EvalError, ReportRow};
use crate::ingest::{self, CohortOptions, ExclusionReason, IngestError, Target, DEFAULT_MIN_CGM_LENGTH};
use crate::net::{checkpoint_save, NetError};
use crate::sync::{SyncConfig, SyncError, TruncateMode};
use crate::synthgen::{self, SynthConfig, SynthError};
use crate::train::{self, Experiment, FusedCohort, TrainConfig, TrainError};

pub const VERSION: &str = concat!("cgmwd ", env!("CARGO_PKG_VERSION"));

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::TooFewPatients { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(IngestError, SyncError, NetError, EvalError, std::io::Error);

#[derive(Parser, Debug)]
#[command(name = "cgmwd", version, about = "Biomarker-change prediction from CGM and actigraphy")]
struct Cli {
    /// Flat `key = value` config file; command-line flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread cap
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with planted targets
    Synth(SynthArgs),
    /// Validate a cohort manifest and summarize inclusion
    Ingest(IngestArgs),
    /// Fuse CGM and activity streams and truncate to a common length
    Sync(SyncArgs),
    /// Cross-validated training of one experiment
    Train(TrainArgs),
    /// Score out-of-fold predictions
    Evaluate(EvaluateArgs),
    /// Merge report CSVs into one table
    Report(ReportArgs),
    /// synth, sync, train and evaluate in one run
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug, Default)]
struct SynthOpts {
    #[arg(long)]
    n_patients: Option<usize>,
    #[arg(long)]
    days: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Activity epoch dropout rate
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct CohortOpts {
    /// hba1c, hdl, ldl or triglycerides
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    min_cgm_length: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct SyncOpts {
    #[arg(long)]
    overlap_ratio: Option<f64>,
    /// CGM sampling interval in seconds
    #[arg(long)]
    cgm_interval: Option<i64>,
    /// earliest or latest
    #[arg(long)]
    truncate: Option<String>,
    /// Cap on the common sequence length
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct TrainOpts {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Squash the wide branch with a sigmoid
    #[arg(long)]
    wide_sigmoid: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    synth: SynthOpts,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    cohort: CohortOpts,
    /// Also write cohort_summary.csv here
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SyncArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    cohort: CohortOpts,
    #[command(flatten)]
    sync: SyncOpts,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, conflicts_with = "fused_dir")]
    manifest: Option<PathBuf>,
    /// Output directory of `sync`
    #[arg(long)]
    fused_dir: Option<PathBuf>,
    /// wide-only, deep-cgm, deep-cgm-activity or wide-and-deep
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cohort: CohortOpts,
    #[command(flatten)]
    sync: SyncOpts,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// predictions.csv written by `train`
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// run_info.txt written by `train` (default: next to the predictions)
    #[arg(long)]
    run_info: Option<PathBuf>,
    /// Report CSV path; a .txt table is written alongside
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report CSVs to merge, in row order
    #[arg(long, num_args = 1..)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    synth: SynthOpts,
    #[command(flatten)]
    cohort: CohortOpts,
    #[command(flatten)]
    sync: SyncOpts,
    #[command(flatten)]
    train: TrainOpts,
    /// Comma-separated experiment keys (default: all four)
    #[arg(long)]
    experiments: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

const KNOWN_KEYS: &[&str] = &[
    "n-patients",
    "days",
    "seed",
    "noise-sd",
    "dropout",
    "target",
    "min-cgm-length",
    "overlap-ratio",
    "cgm-interval",
    "truncate",
    "max-len",
    "epochs",
    "folds",
    "lr",
    "hidden-dim",
    "wide-sigmoid",
    "experiment",
    "experiments",
    "manifest",
    "fused-dir",
    "predictions",
    "run-info",
    "out",
    "out-dir",
    "threads",
    "log-level",
];

/// Parses `key = value` lines with `#` comments. Underscores in keys are
/// read as dashes.
pub fn parse_key_values(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
        let key = k.trim().replace('_', "-");
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key `{key}`", n + 1));
        }
    }
    Ok(out)
}

/// [`parse_key_values`] restricted to recognized option names.
pub fn parse_config(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let cfg = parse_key_values(text)?;
    if let Some(k) = cfg.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
        return Err(format!("unknown key `{k}`"));
    }
    Ok(cfg)
}

/// Merges flags over config-file values and records what was used.
struct Resolver {
    file: BTreeMap<String, String>,
    used: BTreeMap<String, String>,
}

impl Resolver {
    fn parse<T: FromStr>(&self, key: &str, raw: &str) -> Result<T>
    where
        T::Err: Display,
    {
        raw.parse()
            .map_err(|e| CliError::Usage(format!("config key `{key}` = `{raw}`: {e}")))
    }

    fn optional<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(self.parse(key, raw)?),
                None => None,
            },
        };
        if let Some(v) = &v {
            self.used.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    fn value<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.optional(key, flag)?.unwrap_or(default);
        self.used.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = if flag {
            true
        } else {
            match self.file.get(key) {
                Some(raw) => self.parse(key, raw)?,
                None => false,
            }
        };
        self.used.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let v = flag.or_else(|| self.file.get(key).map(PathBuf::from));
        if let Some(p) = &v {
            self.used.insert(key.to_string(), p.display().to_string());
        }
        Ok(v)
    }

    fn required_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.path(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("--{key} is required")))
    }

    fn target(&mut self, flag: Option<String>) -> Result<Target> {
        let s = self.value("target", flag, "hba1c".to_string())?;
        s.parse().map_err(|e: IngestError| CliError::Usage(e.to_string()))
    }

    fn echo(&self, dir: &Path, command: &str) -> Result<()> {
        let mut text = format!("# {VERSION}\ncommand = {command}\n");
        for (k, v) in &self.used {
            text.push_str(&format!("{k} = {v}\n"));
        }
        let path = dir.join(format!("resolved_config_{command}.txt"));
        std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}

fn synth_config(r: &mut Resolver, o: SynthOpts) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    Ok(SynthConfig {
        n_patients: r.value("n-patients", o.n_patients, d.n_patients)?,
        days: r.value("days", o.days, d.days)?,
        seed: r.value("seed", o.seed, d.seed)?,
        noise_sd: r.value("noise-sd", o.noise_sd, d.noise_sd)?,
        dropout_rate: r.value("dropout", o.dropout, d.dropout_rate)?,
        ..d
    })
}

struct SyncSettings {
    overlap_ratio: f64,
    cgm_interval: i64,
    mode: TruncateMode,
    max_len: Option<usize>,
}

fn sync_settings(r: &mut Resolver, o: SyncOpts) -> Result<SyncSettings> {
    let mode = match r.value("truncate", o.truncate, "earliest".to_string())?.as_str() {
        "earliest" => TruncateMode::EarliestPrefix,
        "latest" => TruncateMode::LatestSuffix,
        other => return Err(CliError::Usage(format!("--truncate must be earliest or latest, got `{other}`"))),
    };
    Ok(SyncSettings {
        overlap_ratio: r.value("overlap-ratio", o.overlap_ratio, 0.5)?,
        cgm_interval: r.value("cgm-interval", o.cgm_interval, ingest::DEFAULT_CGM_INTERVAL)?,
        mode,
        max_len: r.optional("max-len", o.max_len)?,
    })
}

fn train_config(r: &mut Resolver, o: TrainOpts, seed: u64, experiment: Experiment, target: Target) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: r.value("epochs", o.epochs, d.epochs)?,
        folds: r.value("folds", o.folds, d.folds)?,
        learning_rate: r.value("lr", o.lr, d.learning_rate)?,
        seed,
        experiment,
        target,
        hidden_dim: r.value("hidden-dim", o.hidden_dim, d.hidden_dim)?,
        wide_sigmoid: r.switch("wide-sigmoid", o.wide_sigmoid)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_experiment(s: &str) -> Result<Experiment> {
    s.parse().map_err(|e: TrainError| CliError::Usage(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn load(manifest: &Path, target: Target, min_cgm_length: usize) -> Result<ingest::Cohort> {
    let cohort = ingest::load_cohort(manifest, &CohortOptions { target, min_cgm_length })?;
    for (id, why) in &cohort.excluded {
        info!("excluded {id}: {}", describe_exclusion(why));
    }
    info!(
        "{} patients retained, {} excluded",
        cohort.patients.len(),
        cohort.excluded.len()
    );
    Ok(cohort)
}

fn describe_exclusion(r: &ExclusionReason) -> String {
    match r {
        ExclusionReason::MissingFollowup => "missing follow-up".into(),
        ExclusionReason::ShortCgm { length, floor } => format!("CGM length {length} below {floor}"),
    }
}

fn fuse(cohort: &ingest::Cohort, s: &SyncSettings) -> Result<FusedCohort> {
    let epoch = cohort
        .patients
        .first()
        .map(|p| p.activity.epoch_length)
        .ok_or_else(|| CliError::Runtime("no patients left after exclusions".into()))?;
    let cfg = SyncConfig::new(s.cgm_interval, epoch, s.overlap_ratio).map_err(|e| CliError::Usage(e.to_string()))?;
    let fused = FusedCohort::from_cohort(cohort, &cfg, s.mode, s.max_len)?;
    info!(
        "fused {} patients, window {} epochs, common length {}",
        fused.patients.len(),
        cfg.window_size,
        fused.common_length
    );
    Ok(fused)
}

fn run_synth(r: &mut Resolver, a: SynthArgs) -> Result<()> {
    let cfg = synth_config(r, a.synth)?;
    let out = r.required_path("out-dir", a.out_dir)?;
    cfg.validate()?;
    create_dir(&out)?;
    let manifest = write_synth(&cfg, &out)?;
    r.echo(&out, "synth")?;
    println!("{}", manifest.display());
    Ok(())
}

fn write_synth(cfg: &SynthConfig, out: &Path) -> Result<PathBuf> {
    let cohort = synthgen::generate_cohort(cfg)?;
    let manifest = synthgen::write_cohort(&cohort, cfg, out)?;
    info!("wrote {} synthetic patients to {}", cfg.n_patients, out.display());
    Ok(manifest)
}

fn run_ingest(r: &mut Resolver, a: IngestArgs) -> Result<()> {
    let manifest = r.required_path("manifest", a.manifest)?;
    let target = r.target(a.cohort.target)?;
    let floor = r.value("min-cgm-length", a.cohort.min_cgm_length, DEFAULT_MIN_CGM_LENGTH)?;
    let out = r.path("out-dir", a.out_dir)?;
    let cohort = load(&manifest, target, floor)?;
    let mut rows = Vec::new();
    for p in &cohort.patients {
        rows.push([
            p.id.clone(),
            "included".into(),
            String::new(),
            p.cgm.samples.len().to_string(),
            p.activity.samples.len().to_string(),
            p.target.delta.to_string(),
        ]);
    }
    for (id, why) in &cohort.excluded {
        rows.push([id.clone(), "excluded".into(), describe_exclusion(why), String::new(), String::new(), String::new()]);
    }
    let header = ["patient_id", "status", "reason", "cgm_len", "activity_len", "delta"];
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).and_then(|_| rows.iter().try_for_each(|row| w.write_record(row)))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(out) = out {
        create_dir(&out)?;
        std::fs::write(out.join("cohort_summary.csv"), &bytes)?;
        r.echo(&out, "ingest")?;
    }
    std::io::stdout().write_all(&bytes)?;
    Ok(())
}

fn run_sync(r: &mut Resolver, a: SyncArgs) -> Result<()> {
    let manifest = r.required_path("manifest", a.manifest)?;
    let target = r.target(a.cohort.target)?;
    let floor = r.value("min-cgm-length", a.cohort.min_cgm_length, DEFAULT_MIN_CGM_LENGTH)?;
    let s = sync_settings(r, a.sync)?;
    let out = r.required_path("out-dir", a.out_dir)?;
    let cohort = load(&manifest, target, floor)?;
    let fused = fuse(&cohort, &s)?;
    create_dir(&out)?;
    train::write_fused_cohort(&fused, &out)?;
    r.echo(&out, "sync")?;
    println!("common_length = {}", fused.common_length);
    Ok(())
}

/// Trains one experiment and writes checkpoints, predictions, the loss log
/// and `run_info.txt` into `out`. Returns the evaluated report.
fn train_experiment(fused: &FusedCohort, cfg: &TrainConfig, out: &Path) -> Result<eval::EvalReport> {
    create_dir(out)?;
    let examples = train::build_inputs(fused, cfg.experiment)?;
    info!(
        "training {} on {} patients ({} folds, {} epochs)",
        cfg.experiment,
        examples.len(),
        cfg.folds,
        cfg.epochs
    );
    let cv = train::cross_validate(&examples, cfg)?;
    let mut losses = String::from("fold,epoch,loss\n");
    for f in &cv.folds {
        checkpoint_save(&f.model.params, &out.join(format!("fold_{}.ckpt", f.fold)))?;
        for (e, l) in f.model.epoch_losses.iter().enumerate() {
            losses.push_str(&format!("{},{},{}\n", f.fold, e, l));
        }
    }
    std::fs::write(out.join("loss_log.csv"), losses)?;
    let preds_path = out.join("predictions.csv");
    train::write_predictions(&cv.predictions, &preds_path)?;
    let size = input_size(fused, cfg.experiment);
    std::fs::write(
        out.join("run_info.txt"),
        format!("experiment = {}\nsize = {size}\n", cfg.experiment.key()),
    )?;
    Ok(eval::evaluate(&cv.predictions, cfg.experiment, &size)?)
}

fn input_size(fused: &FusedCohort, e: Experiment) -> String {
    eval::size_label(
        fused.patients.len(),
        e.seq_width().map(|w| (fused.common_length, w)),
        e.uses_wide(),
    )
}

fn run_train(r: &mut Resolver, a: TrainArgs) -> Result<()> {
    let manifest = r.path("manifest", a.manifest)?;
    let fused_dir = r.path("fused-dir", a.fused_dir)?;
    let experiment = parse_experiment(&r.value("experiment", a.experiment, Experiment::WideAndDeep.key().to_string())?)?;
    let seed = r.value("seed", a.seed, 0)?;
    let out = r.required_path("out-dir", a.out_dir)?;
    let fused = match (manifest, fused_dir) {
        (Some(_), Some(_)) => return Err(CliError::Usage("--manifest and --fused-dir are mutually exclusive".into())),
        (None, None) => return Err(CliError::Usage("one of --manifest or --fused-dir is required".into())),
        (Some(m), None) => {
            let target = r.target(a.cohort.target)?;
            let floor = r.value("min-cgm-length", a.cohort.min_cgm_length, DEFAULT_MIN_CGM_LENGTH)?;
            let s = sync_settings(r, a.sync)?;
            fuse(&load(&m, target, floor)?, &s)?
        }
        (None, Some(d)) => {
            let fused = train::read_fused_cohort(&d)?;
            if let Some(t) = r.optional("target", a.cohort.target)? {
                let t: Target = t.parse().map_err(|e: IngestError| CliError::Usage(e.to_string()))?;
                if t != fused.target {
                    return Err(CliError::Usage(format!(
                        "--target {} but {} was fused for {}",
                        t.key(),
                        d.display(),
                        fused.target.key()
                    )));
                }
            }
            r.used.insert("target".into(), fused.target.key().into());
            fused
        }
    };
    let cfg = train_config(r, a.train, seed, experiment, fused.target)?;
    let report = train_experiment(&fused, &cfg, &out)?;
    r.echo(&out, "train")?;
    println!(
        "{} {}: rmse {:.4} accuracy {:.4}",
        report.target.label(),
        experiment.key(),
        report.rmse,
        report.accuracy
    );
    Ok(())
}

fn read_run_info(path: &Path) -> Result<(Experiment, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let cfg = parse_key_values(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let experiment = cfg
        .get("experiment")
        .ok_or_else(|| CliError::Runtime(format!("{}: missing experiment", path.display())))?;
    let experiment = experiment.parse().map_err(|e: TrainError| CliError::Runtime(e.to_string()))?;
    Ok((experiment, cfg.get("size").cloned().unwrap_or_default()))
}

fn run_evaluate(r: &mut Resolver, a: EvaluateArgs) -> Result<()> {
    let preds_path = r.required_path("predictions", a.predictions)?;
    let info_path = r
        .path("run-info", a.run_info)?
        .unwrap_or_else(|| preds_path.with_file_name("run_info.txt"));
    let out = r.required_path("out", a.out)?;
    let (experiment, size) = read_run_info(&info_path)?;
    let preds = train::read_predictions(&preds_path)?;
    let report = eval::evaluate(&preds, experiment, &size)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    let rows = [ReportRow::from(&report)];
    eval::emit_report(&rows, &out)?;
    r.echo(dir, "evaluate")?;
    print!("{}", eval::render_table(&rows));
    Ok(())
}

fn run_report(r: &mut Resolver, a: ReportArgs) -> Result<()> {
    if a.reports.is_empty() {
        return Err(CliError::Usage("--reports needs at least one CSV".into()));
    }
    let out = r.required_path("out", a.out)?;
    r.used.insert(
        "reports".into(),
        a.reports.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
    );
    let mut rows = Vec::new();
    for p in &a.reports {
        rows.extend(eval::read_report_csv(p)?);
    }
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    eval::emit_report(&rows, &out)?;
    r.echo(dir, "report")?;
    print!("{}", eval::render_table(&rows));
    Ok(())
}

fn run_pipeline(r: &mut Resolver, a: PipelineArgs) -> Result<()> {
    let synth_cfg = synth_config(r, a.synth)?;
    synth_cfg.validate()?;
    let target = r.target(a.cohort.target)?;
    let floor = r.value("min-cgm-length", a.cohort.min_cgm_length, synth_cfg.cgm_len())?;
    let s = sync_settings(r, a.sync)?;
    let default_experiments = Experiment::ALL.map(|e| e.key()).join(",");
    let experiments = r
        .value("experiments", a.experiments, default_experiments)?
        .split(',')
        .map(|s| parse_experiment(s.trim()))
        .collect::<Result<Vec<_>>>()?;
    let base = train_config(r, a.train, synth_cfg.seed, experiments[0], target)?;
    let cfgs = experiments
        .iter()
        .map(|&experiment| {
            let cfg = TrainConfig {
                experiment,
                ..base.clone()
            };
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = r.required_path("out-dir", a.out_dir)?;

    let synth_dir = out.join("synth");
    create_dir(&synth_dir)?;
    let manifest = write_synth(&synth_cfg, &synth_dir)?;
    r.echo(&synth_dir, "pipeline")?;

    let fused = fuse(&load(&manifest, target, floor)?, &s)?;
    let sync_dir = out.join("sync");
    create_dir(&sync_dir)?;
    train::write_fused_cohort(&fused, &sync_dir)?;
    r.echo(&sync_dir, "pipeline")?;

    let mut rows = Vec::new();
    for cfg in &cfgs {
        let dir = out.join("train").join(cfg.experiment.key());
        let report = train_experiment(&fused, cfg, &dir)?;
        eval::emit_report(&[ReportRow::from(&report)], &dir.join("report.csv"))?;
        r.echo(&dir, "pipeline")?;
        rows.push(ReportRow::from(&report));
    }
    eval::emit_report(&rows, &out.join("report.csv"))?;
    r.echo(&out, "pipeline")?;
    print!("{}", eval::render_table(&rows));
    Ok(())
}

fn init_logging(level: &str) -> Result<()> {
    let filter: log::LevelFilter = level
        .parse()
        .map_err(|_| CliError::Usage(format!("unknown log level `{level}`")))?;
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .parse_default_env()
        .format(|buf, rec| {
            writeln!(
                buf,
                "ts={} level={} module={} msg={:?}",
                buf.timestamp_millis(),
                rec.level(),
                rec.target(),
                rec.args().to_string()
            )
        })
        .try_init();
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            parse_config(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => BTreeMap::new(),
    };
    let mut r = Resolver {
        file,
        used: BTreeMap::new(),
    };
    let level = match r.file.get("log-level") {
        Some(l) if cli.log_level == "info" => l.clone(),
        _ => cli.log_level.clone(),
    };
    init_logging(&level)?;
    if let Some(n) = r.optional("threads", cli.threads)? {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("thread pool already initialized; --threads ignored");
        }
    }
    match cli.command {
        Command::Synth(a) => run_synth(&mut r, a),
        Command::Ingest(a) => run_ingest(&mut r, a),
        Command::Sync(a) => run_sync(&mut r, a),
        Command::Train(a) => run_train(&mut r, a),
        Command::Evaluate(a) => run_evaluate(&mut r, a),
        Command::Report(a) => run_report(&mut r, a),
        Command::Pipeline(a) => run_pipeline(&mut r, a),
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let cfg = parse_config("# run\nepochs = 5\n\nhidden_dim=8  # small\nout-dir = runs/a\n").unwrap();
        assert_eq!(cfg["epochs"], "5");
        assert_eq!(cfg["hidden-dim"], "8");
        assert_eq!(cfg["out-dir"], "runs/a");
        assert!(parse_config("epochs 5").is_err());
        assert!(parse_config("epoch = 5").is_err());
        assert!(parse_config("epochs = 5\nepochs = 6").is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let mut r = Resolver {
            file: parse_config("epochs = 5\nlr = 0.01").unwrap(),
            used: BTreeMap::new(),
        };
        assert_eq!(r.value("epochs", Some(7usize), 50).unwrap(), 7);
        assert_eq!(r.value("lr", None, 1e-3).unwrap(), 0.01);
        assert_eq!(r.value("folds", None, 5usize).unwrap(), 5);
        assert_eq!(r.used["epochs"], "7");
        assert_eq!(r.used["folds"], "5");
        r.file.insert("days".into(), "many".into());
        assert!(matches!(r.value::<u32>("days", None, 7), Err(CliError::Usage(_))));
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["cgmwd", "train", "--bogus"]), 1);
        assert_eq!(run(["cgmwd", "frobnicate"]), 1);
        assert_eq!(run(["cgmwd", "--version"]), 0);
        assert_eq!(run(["cgmwd", "synth", "--n-patients", "0", "--out-dir", "/nonexistent/x"]), 1);
        assert_eq!(run(["cgmwd", "train", "--manifest", "a", "--fused-dir", "b", "--out-dir", "c"]), 1);
    }

    #[test]
    fn runtime_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.toml");
        assert_eq!(run(["cgmwd", "ingest", "--manifest", missing.to_str().unwrap()]), 2);
    }
}
