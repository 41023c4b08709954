//! Per-patient sensor streams, tabular features and biomarker targets.
//!
//! File formats:
//!
//! * CGM CSV, header `patient_id,timestamp_utc,glucose_mg_dl`
//! * activity CSV, header
//!   `patient_id,timestamp_utc,dx,dy,dz,steps,i_sit,i_std,i_lie,i_off`
//! * cohort manifest, TOML (see [`Manifest`])
//!
//! Timestamps are integer UTC seconds. Rows must already be in strictly
//! increasing time order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CGM_HEADER: [&str; 3] = ["patient_id", "timestamp_utc", "glucose_mg_dl"];
pub const ACTIVITY_HEADER: [&str; 10] = [
    "patient_id",
    "timestamp_utc",
    "dx",
    "dy",
    "dz",
    "steps",
    "i_sit",
    "i_std",
    "i_lie",
    "i_off",
];

pub const DEFAULT_CGM_INTERVAL: i64 = 300;
pub const DEFAULT_ACTIVITY_EPOCH: i64 = 30;
/// Shortest CGM record kept by [`load_cohort`] unless overridden.
pub const DEFAULT_MIN_CGM_LENGTH: usize = 1445;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: io error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: header mismatch: expected `{expected}`, found `{found}`")]
    BadHeader {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("{path}:{line}: timestamp {timestamp} does not follow {previous}")]
    NonMonotonicTimestamps {
        path: PathBuf,
        line: u64,
        previous: i64,
        timestamp: i64,
    },
    #[error("{path}:{line}: glucose must be finite and positive, got {value}")]
    NonPositiveGlucose { path: PathBuf, line: u64, value: f64 },
    #[error("{path}:{line}: field `{field}` must be finite and non-negative, got {value}")]
    NegativeField {
        path: PathBuf,
        line: u64,
        field: &'static str,
        value: f64,
    },
    #[error("{path}:{line}: `{field}` = {value} s exceeds the {epoch} s epoch")]
    InclinometerExceedsEpoch {
        path: PathBuf,
        line: u64,
        field: &'static str,
        value: f64,
        epoch: i64,
    },
    #[error("{0}: series has no samples")]
    EmptySeries(PathBuf),
    #[error("manifest not found: {0}")]
    ManifestMissing(PathBuf),
    #[error("manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },
    #[error("patient {patient}: file not found: {path}")]
    PatientFileMissing { patient: String, path: PathBuf },
    #[error("inconsistent patient ids: expected `{expected}`, found `{found}` in {path}")]
    InconsistentPatientIds {
        expected: String,
        found: String,
        path: PathBuf,
    },
    #[error("invalid value: {0}")]
    InvalidValue(String),
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// Integer seconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn seconds(self) -> i64 {
        self.0
    }

    pub fn abs_diff(self, other: Timestamp) -> u64 {
        self.0.abs_diff(other.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgmSeries {
    pub patient_id: String,
    pub samples: Vec<(Timestamp, f64)>,
    /// Modal gap between consecutive samples, seconds. Falls back to
    /// [`DEFAULT_CGM_INTERVAL`] for single-sample series.
    pub nominal_spacing: i64,
}

impl CgmSeries {
    /// Validates ordering and glucose values and computes the nominal spacing.
    pub fn new(patient_id: impl Into<String>, samples: Vec<(Timestamp, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(IngestError::InvalidValue("empty CGM series".into()));
        }
        for w in samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(IngestError::InvalidValue(format!(
                    "CGM timestamps not strictly increasing at {}",
                    w[1].0
                )));
            }
        }
        if let Some(&(t, g)) = samples.iter().find(|(_, g)| !(g.is_finite() && *g > 0.0)) {
            return Err(IngestError::InvalidValue(format!(
                "non-positive glucose {g} at {t}"
            )));
        }
        let nominal_spacing = modal_gap(samples.iter().map(|s| s.0)).unwrap_or(DEFAULT_CGM_INTERVAL);
        Ok(Self {
            patient_id: patient_id.into(),
            samples,
            nominal_spacing,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_time(&self) -> Timestamp {
        self.samples[0].0
    }

    pub fn last_time(&self) -> Timestamp {
        self.samples[self.samples.len() - 1].0
    }
}

/// One activity epoch: movement counts per axis, steps, and the seconds of the
/// epoch spent sitting, standing, lying, or undetected.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivitySample {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub steps: f64,
    pub i_sit: f64,
    pub i_std: f64,
    pub i_lie: f64,
    pub i_off: f64,
}

impl ActivitySample {
    pub const FIELD_NAMES: [&'static str; 8] =
        ["dx", "dy", "dz", "steps", "i_sit", "i_std", "i_lie", "i_off"];

    pub fn from_array(v: [f64; 8]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dz: v[2],
            steps: v[3],
            i_sit: v[4],
            i_std: v[5],
            i_lie: v[6],
            i_off: v[7],
        }
    }

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.dx, self.dy, self.dz, self.steps, self.i_sit, self.i_std, self.i_lie, self.i_off,
        ]
    }

    /// Returns the first field that is negative or non-finite.
    fn first_invalid(&self) -> Option<(&'static str, f64)> {
        Self::FIELD_NAMES
            .iter()
            .zip(self.to_array())
            .find(|(_, v)| !(v.is_finite() && *v >= 0.0))
            .map(|(n, v)| (*n, v))
    }

    fn first_over_epoch(&self, epoch: i64) -> Option<(&'static str, f64)> {
        let e = epoch as f64;
        [
            ("i_sit", self.i_sit),
            ("i_std", self.i_std),
            ("i_lie", self.i_lie),
            ("i_off", self.i_off),
        ]
        .into_iter()
        .find(|(_, v)| *v > e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivitySeries {
    pub patient_id: String,
    pub epoch_length: i64,
    pub samples: Vec<(Timestamp, ActivitySample)>,
    /// Number of consecutive pairs whose spacing differs from `epoch_length`.
    pub gap_count: usize,
}

impl ActivitySeries {
    pub fn new(
        patient_id: impl Into<String>,
        epoch_length: i64,
        samples: Vec<(Timestamp, ActivitySample)>,
    ) -> Result<Self> {
        if epoch_length <= 0 {
            return Err(IngestError::InvalidValue(format!(
                "epoch length must be positive, got {epoch_length}"
            )));
        }
        if samples.is_empty() {
            return Err(IngestError::InvalidValue("empty activity series".into()));
        }
        let mut gap_count = 0;
        for w in samples.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(IngestError::InvalidValue(format!(
                    "activity timestamps not strictly increasing at {}",
                    w[1].0
                )));
            }
            if w[1].0 .0 - w[0].0 .0 != epoch_length {
                gap_count += 1;
            }
        }
        for (t, s) in &samples {
            if let Some((field, v)) = s.first_invalid() {
                return Err(IngestError::InvalidValue(format!(
                    "activity field {field} = {v} at {t}"
                )));
            }
            if let Some((field, v)) = s.first_over_epoch(epoch_length) {
                return Err(IngestError::InvalidValue(format!(
                    "activity field {field} = {v} exceeds epoch at {t}"
                )));
            }
        }
        Ok(Self {
            patient_id: patient_id.into(),
            epoch_length,
            samples,
            gap_count,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_time(&self) -> Timestamp {
        self.samples[0].0
    }

    pub fn last_time(&self) -> Timestamp {
        self.samples[self.samples.len() - 1].0
    }
}

/// Baseline demographic and lab features, in the fixed wide-branch order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TabularFeatures {
    /// m
    pub height: f64,
    /// kg
    pub weight: f64,
    /// years
    pub age: f64,
    /// m
    pub waist_circumference: f64,
    /// mg/dL
    pub triglycerides: f64,
    /// mg/dL
    pub ldl: f64,
    /// mg/dL
    pub hdl: f64,
    /// mg/dL
    pub vldl: f64,
}

impl TabularFeatures {
    pub const WIDTH: usize = 8;
    pub const FIELD_NAMES: [&'static str; 8] = [
        "height",
        "weight",
        "age",
        "waist_circumference",
        "triglycerides",
        "ldl",
        "hdl",
        "vldl",
    ];

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.height,
            self.weight,
            self.age,
            self.waist_circumference,
            self.triglycerides,
            self.ldl,
            self.hdl,
            self.vldl,
        ]
    }

    pub fn from_array(v: [f64; 8]) -> Self {
        Self {
            height: v[0],
            weight: v[1],
            age: v[2],
            waist_circumference: v[3],
            triglycerides: v[4],
            ldl: v[5],
            hdl: v[6],
            vldl: v[7],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::FIELD_NAMES.iter().zip(self.to_array()) {
            if !v.is_finite() {
                return Err(IngestError::InvalidValue(format!("{name} is not finite")));
            }
        }
        for (name, v) in [
            ("height", self.height),
            ("weight", self.weight),
            ("age", self.age),
            ("waist_circumference", self.waist_circumference),
        ] {
            if v <= 0.0 {
                return Err(IngestError::InvalidValue(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    HbA1c,
    Hdl,
    Ldl,
    Triglycerides,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::HbA1c, Target::Hdl, Target::Ldl, Target::Triglycerides];

    /// Key used in manifests, CSV files and on the command line.
    pub fn key(self) -> &'static str {
        match self {
            Target::HbA1c => "hba1c",
            Target::Hdl => "hdl",
            Target::Ldl => "ldl",
            Target::Triglycerides => "triglycerides",
        }
    }

    /// Row label used in rendered reports.
    pub fn label(self) -> &'static str {
        match self {
            Target::HbA1c => "HBA1c",
            Target::Hdl => "HDL",
            Target::Ldl => "LDL",
            Target::Triglycerides => "TC",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Target::HbA1c => "%",
            _ => "mg/dL",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Target {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hba1c" => Ok(Target::HbA1c),
            "hdl" => Ok(Target::Hdl),
            "ldl" => Ok(Target::Ldl),
            "triglycerides" | "tc" | "tg" => Ok(Target::Triglycerides),
            other => Err(IngestError::InvalidValue(format!("unknown target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiomarkerDelta {
    pub target: Target,
    pub baseline: f64,
    pub followup: f64,
    pub delta: f64,
}

impl BiomarkerDelta {
    pub fn new(target: Target, baseline: f64, followup: f64) -> Self {
        Self {
            target,
            baseline,
            followup,
            delta: followup - baseline,
        }
    }

    /// Checks the stored delta against `followup - baseline` (exact equality).
    pub fn checked(target: Target, baseline: f64, followup: f64, delta: f64) -> Result<Self> {
        let d = Self::new(target, baseline, followup);
        if !(baseline.is_finite() && followup.is_finite()) {
            return Err(IngestError::InvalidValue(format!("{target}: non-finite biomarker")));
        }
        if d.delta != delta {
            return Err(IngestError::InvalidValue(format!(
                "{target}: stored delta {delta} != followup - baseline = {}",
                d.delta
            )));
        }
        Ok(d)
    }
}

fn modal_gap(times: impl Iterator<Item = Timestamp>) -> Option<i64> {
    let times: Vec<i64> = times.map(|t| t.0).collect();
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for w in times.windows(2) {
        *counts.entry(w[1] - w[0]).or_default() += 1;
    }
    // ties resolve to the smallest gap
    counts
        .into_iter()
        .fold(None, |best: Option<(i64, usize)>, (gap, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((gap, n)),
        })
        .map(|(gap, _)| gap)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn open_csv(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr.headers().map_err(|e| IngestError::MalformedRow {
        path: path.to_path_buf(),
        line: 1,
        reason: e.to_string(),
    })?;
    let found: Vec<&str> = headers.iter().collect();
    if found != expected {
        return Err(IngestError::BadHeader {
            path: path.to_path_buf(),
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(rdr)
}

struct RowCtx<'a> {
    path: &'a Path,
    line: u64,
}

impl RowCtx<'_> {
    fn malformed(&self, reason: impl Into<String>) -> IngestError {
        IngestError::MalformedRow {
            path: self.path.to_path_buf(),
            line: self.line,
            reason: reason.into(),
        }
    }

    fn parse<T: FromStr>(&self, rec: &csv::StringRecord, idx: usize, name: &str) -> Result<T> {
        let raw = rec
            .get(idx)
            .ok_or_else(|| self.malformed(format!("missing column `{name}`")))?;
        raw.parse()
            .map_err(|_| self.malformed(format!("cannot parse `{name}` from `{raw}`")))
    }
}

fn read_records(
    path: &Path,
    expected: &[&str],
) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut rdr = open_csv(path, expected)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            IngestError::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: e.to_string(),
            }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != expected.len() {
            return Err(IngestError::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: format!("expected {} fields, found {}", expected.len(), rec.len()),
            });
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn check_patient(path: &Path, current: &mut Option<String>, id: &str) -> Result<()> {
    match current {
        None => {
            *current = Some(id.to_string());
            Ok(())
        }
        Some(expected) if expected == id => Ok(()),
        Some(expected) => Err(IngestError::InconsistentPatientIds {
            expected: expected.clone(),
            found: id.to_string(),
            path: path.to_path_buf(),
        }),
    }
}

pub fn parse_cgm_csv(path: &Path) -> Result<CgmSeries> {
    let mut patient: Option<String> = None;
    let mut samples: Vec<(Timestamp, f64)> = Vec::new();
    for (line, rec) in read_records(path, &CGM_HEADER)? {
        let ctx = RowCtx { path, line };
        check_patient(path, &mut patient, &rec[0])?;
        let t = Timestamp(ctx.parse(&rec, 1, "timestamp_utc")?);
        let g: f64 = ctx.parse(&rec, 2, "glucose_mg_dl")?;
        if !(g.is_finite() && g > 0.0) {
            return Err(IngestError::NonPositiveGlucose {
                path: path.to_path_buf(),
                line,
                value: g,
            });
        }
        if let Some(&(prev, _)) = samples.last() {
            if t <= prev {
                return Err(IngestError::NonMonotonicTimestamps {
                    path: path.to_path_buf(),
                    line,
                    previous: prev.0,
                    timestamp: t.0,
                });
            }
        }
        samples.push((t, g));
    }
    match patient {
        None => Err(IngestError::EmptySeries(path.to_path_buf())),
        Some(id) => CgmSeries::new(id, samples),
    }
}

pub fn parse_activity_csv(path: &Path, epoch_length: i64) -> Result<ActivitySeries> {
    if epoch_length <= 0 {
        return Err(IngestError::InvalidValue(format!(
            "epoch length must be positive, got {epoch_length}"
        )));
    }
    let mut patient: Option<String> = None;
    let mut samples: Vec<(Timestamp, ActivitySample)> = Vec::new();
    for (line, rec) in read_records(path, &ACTIVITY_HEADER)? {
        let ctx = RowCtx { path, line };
        check_patient(path, &mut patient, &rec[0])?;
        let t = Timestamp(ctx.parse(&rec, 1, "timestamp_utc")?);
        let mut v = [0.0; 8];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = ctx.parse(&rec, k + 2, ActivitySample::FIELD_NAMES[k])?;
        }
        let sample = ActivitySample::from_array(v);
        if let Some((field, value)) = sample.first_invalid() {
            return Err(IngestError::NegativeField {
                path: path.to_path_buf(),
                line,
                field,
                value,
            });
        }
        if let Some((field, value)) = sample.first_over_epoch(epoch_length) {
            return Err(IngestError::InclinometerExceedsEpoch {
                path: path.to_path_buf(),
                line,
                field,
                value,
                epoch: epoch_length,
            });
        }
        if let Some(&(prev, _)) = samples.last() {
            if t <= prev {
                return Err(IngestError::NonMonotonicTimestamps {
                    path: path.to_path_buf(),
                    line,
                    previous: prev.0,
                    timestamp: t.0,
                });
            }
        }
        samples.push((t, sample));
    }
    let Some(id) = patient else {
        return Err(IngestError::EmptySeries(path.to_path_buf()));
    };
    let series = ActivitySeries::new(id, epoch_length, samples)?;
    if series.gap_count > 0 {
        log::warn!(
            "{}: {} activity gaps (spacing != {} s)",
            path.display(),
            series.gap_count,
            epoch_length
        );
    }
    Ok(series)
}

/// Writes floats in shortest round-trip form so re-parsing is bit-identical.
pub fn write_cgm_csv(series: &CgmSeries, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let werr = |e: csv::Error| IngestError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    w.write_record(CGM_HEADER).map_err(werr)?;
    for (t, g) in &series.samples {
        w.write_record([series.patient_id.as_str(), &t.0.to_string(), &g.to_string()])
            .map_err(werr)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_activity_csv(series: &ActivitySeries, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let werr = |e: csv::Error| IngestError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    w.write_record(ACTIVITY_HEADER).map_err(werr)?;
    let mut row: Vec<String> = Vec::with_capacity(10);
    for (t, s) in &series.samples {
        row.clear();
        row.push(series.patient_id.clone());
        row.push(t.0.to_string());
        row.extend(s.to_array().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(werr)?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

/// Baseline / follow-up pair for one biomarker. `followup` may be absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerEntry {
    pub baseline: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub followup: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub id: String,
    /// Relative to the manifest directory.
    pub cgm: PathBuf,
    pub activity: PathBuf,
    pub tabular: TabularFeatures,
    #[serde(default)]
    pub biomarkers: BTreeMap<String, BiomarkerEntry>,
}

/// Cohort manifest, stored as TOML:
///
/// ```toml
/// activity_epoch = 30
///
/// [[patient]]
/// id = "P001"
/// cgm = "cgm/P001.csv"
/// activity = "activity/P001.csv"
///
/// [patient.tabular]
/// height = 1.72
/// # ... all eight features
///
/// [patient.biomarkers.hba1c]
/// baseline = 7.1
/// followup = 7.4
/// delta = 0.3000000000000007   # optional, checked when present
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_epoch")]
    pub activity_epoch: i64,
    #[serde(default, rename = "patient")]
    pub patients: Vec<ManifestPatient>,
}

fn default_epoch() -> i64 {
    DEFAULT_ACTIVITY_EPOCH
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(IngestError::ManifestMissing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| IngestError::BadManifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| IngestError::BadManifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut f = File::create(path).map_err(io_err(path))?;
        f.write_all(text.as_bytes()).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortOptions {
    pub target: Target,
    pub min_cgm_length: usize,
}

impl Default for CohortOptions {
    fn default() -> Self {
        Self {
            target: Target::HbA1c,
            min_cgm_length: DEFAULT_MIN_CGM_LENGTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub cgm: CgmSeries,
    pub activity: ActivitySeries,
    pub tabular: TabularFeatures,
    pub target: BiomarkerDelta,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExclusionReason {
    MissingFollowup,
    ShortCgm { length: usize, floor: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub target: Target,
    pub patients: Vec<Patient>,
    pub excluded: Vec<(String, ExclusionReason)>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }
}

/// Loads every patient in the manifest and applies the exclusion rules:
/// missing follow-up for the selected target first, then the CGM length floor.
pub fn load_cohort(manifest_path: &Path, opts: &CohortOptions) -> Result<Cohort> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen: HashMap<&str, ()> = HashMap::new();
    let mut patients = Vec::new();
    let mut excluded = Vec::new();

    for entry in &manifest.patients {
        if seen.insert(entry.id.as_str(), ()).is_some() {
            return Err(IngestError::BadManifest {
                path: manifest_path.to_path_buf(),
                reason: format!("duplicate patient id `{}`", entry.id),
            });
        }
        let cgm_path = base.join(&entry.cgm);
        let act_path = base.join(&entry.activity);
        for p in [&cgm_path, &act_path] {
            if !p.is_file() {
                return Err(IngestError::PatientFileMissing {
                    patient: entry.id.clone(),
                    path: p.clone(),
                });
            }
        }
        entry.tabular.validate()?;

        let Some(bio) = entry.biomarkers.get(opts.target.key()) else {
            log::info!("excluding {}: no {} record", entry.id, opts.target);
            excluded.push((entry.id.clone(), ExclusionReason::MissingFollowup));
            continue;
        };
        let Some(followup) = bio.followup else {
            log::info!("excluding {}: missing {} follow-up", entry.id, opts.target);
            excluded.push((entry.id.clone(), ExclusionReason::MissingFollowup));
            continue;
        };
        let target = match bio.delta {
            Some(d) => BiomarkerDelta::checked(opts.target, bio.baseline, followup, d)?,
            None => BiomarkerDelta::new(opts.target, bio.baseline, followup),
        };

        let cgm = parse_cgm_csv(&cgm_path)?;
        let activity = parse_activity_csv(&act_path, manifest.activity_epoch)?;
        for (found, path) in [(&cgm.patient_id, &cgm_path), (&activity.patient_id, &act_path)] {
            if found != &entry.id {
                return Err(IngestError::InconsistentPatientIds {
                    expected: entry.id.clone(),
                    found: found.clone(),
                    path: path.clone(),
                });
            }
        }
        if cgm.len() < opts.min_cgm_length {
            log::info!(
                "excluding {}: CGM length {} below floor {}",
                entry.id,
                cgm.len(),
                opts.min_cgm_length
            );
            excluded.push((
                entry.id.clone(),
                ExclusionReason::ShortCgm {
                    length: cgm.len(),
                    floor: opts.min_cgm_length,
                },
            ));
            continue;
        }
        patients.push(Patient {
            id: entry.id.clone(),
            cgm,
            activity,
            tabular: entry.tabular,
            target,
        });
    }
    log::info!(
        "cohort loaded: {} retained, {} excluded, target {}",
        patients.len(),
        excluded.len(),
        opts.target
    );
    Ok(Cohort {
        target: opts.target,
        patients,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn cgm_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.csv",
            "patient_id,timestamp_utc,glucose_mg_dl\nP1,0,100\nP1,300,110\nP1,600,105\n",
        );
        let s = parse_cgm_csv(&p).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.nominal_spacing, 300);
        assert_eq!(s.samples[1], (Timestamp(300), 110.0));
    }

    #[test]
    fn cgm_shuffled_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.csv",
            "patient_id,timestamp_utc,glucose_mg_dl\nP1,300,110\nP1,0,100\nP1,600,105\n",
        );
        match parse_cgm_csv(&p) {
            Err(IngestError::NonMonotonicTimestamps { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cgm_duplicate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.csv",
            "patient_id,timestamp_utc,glucose_mg_dl\nP1,0,100\nP1,0,110\n",
        );
        assert!(matches!(
            parse_cgm_csv(&p),
            Err(IngestError::NonMonotonicTimestamps { .. })
        ));
    }

    #[test]
    fn cgm_errors() {
        let dir = tempfile::tempdir().unwrap();
        let h = "patient_id,timestamp_utc,glucose_mg_dl\n";
        let p = write(dir.path(), "a.csv", &format!("{h}P1,0,100\nP1,x,5\n"));
        match parse_cgm_csv(&p) {
            Err(IngestError::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "b.csv", &format!("{h}P1,0,0\n"));
        assert!(matches!(parse_cgm_csv(&p), Err(IngestError::NonPositiveGlucose { .. })));
        let p = write(dir.path(), "c.csv", h);
        assert!(matches!(parse_cgm_csv(&p), Err(IngestError::EmptySeries(_))));
        let p = write(dir.path(), "d.csv", "id,t,g\nP1,0,100\n");
        assert!(matches!(parse_cgm_csv(&p), Err(IngestError::BadHeader { .. })));
        let p = write(dir.path(), "e.csv", &format!("{h}P1,0,100\nP2,300,100\n"));
        assert!(matches!(
            parse_cgm_csv(&p),
            Err(IngestError::InconsistentPatientIds { .. })
        ));
    }

    #[test]
    fn cgm_default_minimum_length() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("patient_id,timestamp_utc,glucose_mg_dl\n");
        for i in 0..1445 {
            body.push_str(&format!("P1,{},{}\n", i * 300, 100 + i % 50));
        }
        let s = parse_cgm_csv(&write(dir.path(), "c.csv", &body)).unwrap();
        assert_eq!(s.len(), 1445);
        assert_eq!(s.nominal_spacing, 300);
    }

    #[test]
    fn activity_parse_and_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let h = ACTIVITY_HEADER.join(",");
        let p = write(dir.path(), "a.csv", &format!("{h}\nP1,0,0,0,0,0,0,0,0,0\n"));
        let s = parse_activity_csv(&p, 30).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.samples[0].1, ActivitySample::default());

        let p = write(dir.path(), "b.csv", &format!("{h}\nP1,0,1,2,3,4,31,0,0,0\n"));
        assert!(matches!(
            parse_activity_csv(&p, 30),
            Err(IngestError::InclinometerExceedsEpoch { field: "i_sit", .. })
        ));
        let p = write(dir.path(), "c.csv", &format!("{h}\nP1,0,1,-2,3,4,0,0,0,0\n"));
        assert!(matches!(
            parse_activity_csv(&p, 30),
            Err(IngestError::NegativeField { field: "dy", .. })
        ));
    }

    #[test]
    fn activity_week_at_30s() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = ACTIVITY_HEADER.join(",");
        body.push('\n');
        for i in 0..20160 {
            body.push_str(&format!("P1,{},1,2,3,0,10,10,10,0\n", i * 30));
        }
        let s = parse_activity_csv(&write(dir.path(), "a.csv", &body), 30).unwrap();
        assert_eq!(s.len(), 20160);
        assert_eq!(s.gap_count, 0);
    }

    #[test]
    fn activity_gaps_flagged() {
        let s = ActivitySeries::new(
            "P",
            30,
            vec![
                (Timestamp(0), ActivitySample::default()),
                (Timestamp(30), ActivitySample::default()),
                (Timestamp(120), ActivitySample::default()),
            ],
        )
        .unwrap();
        assert_eq!(s.gap_count, 1);
    }

    #[test]
    fn biomarker_delta_check() {
        assert!(BiomarkerDelta::checked(Target::HbA1c, 7.0, 7.5, 0.5).is_ok());
        assert!(BiomarkerDelta::checked(Target::HbA1c, 7.0, 7.5, 0.4).is_err());
    }

    #[test]
    fn target_round_trip() {
        for t in Target::ALL {
            assert_eq!(t.key().parse::<Target>().unwrap(), t);
        }
    }

    #[test]
    fn modal_gap_prefers_most_common() {
        let ts = [0, 300, 600, 1200, 1500].map(Timestamp);
        assert_eq!(modal_gap(ts.into_iter()), Some(300));
        assert_eq!(modal_gap([Timestamp(5)].into_iter()), None);
    }
}
