//! Synthetic cohorts with the same file layout as real data and a planted,
//! recoverable link between sensor statistics and biomarker change.
//!
//! Every patient draws from its own [`SplitMix64`] sub-streams
//! (`derive(seed, 4 * index + k)` with `k` = 0 state, 1 CGM, 2 activity,
//! 3 target noise, itself split per target), so patients can be generated in
//! any order or in parallel.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{
    self, ActivitySample, ActivitySeries, BiomarkerEntry, CgmSeries, IngestError, Manifest, ManifestPatient,
    TabularFeatures, Target, Timestamp,
};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub days: u32,
    pub cgm_interval: i64,
    pub activity_epoch: i64,
    pub seed: u64,
    /// Standard deviation of the target noise, in HbA1c points.
    pub noise_sd: f64,
    /// Probability that an activity epoch is missing.
    pub dropout_rate: f64,
    pub meals_per_day: u32,
    /// mg/dL
    pub circadian_amplitude: f64,
    /// mg/dL
    pub glucose_noise_sd: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 63,
            days: 7,
            cgm_interval: 300,
            activity_epoch: 30,
            seed: 0,
            noise_sd: 0.3,
            dropout_rate: 0.02,
            meals_per_day: 3,
            circadian_amplitude: 10.0,
            glucose_noise_sd: 5.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.days == 0 {
            return bad("days must be positive".into());
        }
        if self.cgm_interval <= 0 || self.activity_epoch <= 0 {
            return bad("intervals must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad(format!("noise_sd {} must be non-negative", self.noise_sd));
        }
        if !(self.glucose_noise_sd >= 0.0 && self.circadian_amplitude.is_finite()) {
            return bad("glucose noise and circadian amplitude must be finite, noise non-negative".into());
        }
        Ok(())
    }

    pub fn cgm_len(&self) -> usize {
        (self.days as i64 * 86_400 / self.cgm_interval) as usize
    }

    pub fn activity_len(&self) -> usize {
        (self.days as i64 * 86_400 / self.activity_epoch) as usize
    }
}

/// One post-prandial excursion: `amplitude * (τ/peak) * exp(1 - τ/peak)` for
/// `τ = t - onset >= 0`, peaking at `onset + peak`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Meal {
    /// Seconds after the series start.
    pub onset: f64,
    pub amplitude: f64,
    pub peak: f64,
}

impl Meal {
    fn value(&self, t: f64) -> f64 {
        let tau = t - self.onset;
        if tau <= 0.0 {
            return 0.0;
        }
        let r = tau / self.peak;
        self.amplitude * r * (1.0 - r).exp()
    }
}

/// Everything about a patient that is fixed before the signals are sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientState {
    pub id: String,
    pub start: Timestamp,
    /// mg/dL
    pub baseline_glucose: f64,
    pub meals: Vec<Meal>,
    /// Multiplier on movement intensity.
    pub activity_level: f64,
    /// Hour of day.
    pub wake_hour: f64,
    pub sleep_hour: f64,
    pub tabular: TabularFeatures,
    pub hba1c_baseline: f64,
}

const MEAL_HOURS: [f64; 3] = [7.5, 12.5, 18.5];
const DAY: f64 = 86_400.0;

impl PatientState {
    pub fn draw(index: usize, cfg: &SynthConfig, rng: &mut SplitMix64) -> Self {
        // midnight-aligned start somewhere in 2020
        let start = 1_577_836_800 + (rng.below(365) as i64) * 86_400;
        let baseline_glucose = rng.uniform(90.0, 180.0);
        let mut meals = Vec::new();
        for day in 0..cfg.days {
            for m in 0..cfg.meals_per_day {
                let hour = if cfg.meals_per_day as usize == MEAL_HOURS.len() {
                    MEAL_HOURS[m as usize]
                } else {
                    6.0 + 14.0 * (m as f64 + 0.5) / cfg.meals_per_day as f64
                };
                let onset = day as f64 * DAY + (hour + rng.normal(0.0, 0.5)) * 3600.0;
                let decay = rng.uniform(2.0, 3.0) * 3600.0;
                meals.push(Meal {
                    onset,
                    amplitude: rng.uniform(30.0, 80.0),
                    peak: decay / 3.0,
                });
            }
        }
        let activity_level = rng.uniform(0.3, 1.5);
        let wake_hour = rng.uniform(6.0, 8.0);
        let sleep_hour = rng.uniform(22.0, 23.5);

        let height = rng.normal(1.70, 0.09).clamp(1.45, 2.0);
        let weight = rng.uniform(60.0, 120.0);
        let age = rng.uniform(40.0, 75.0);
        let waist = 0.55 + 0.004 * weight + rng.normal(0.0, 0.03);
        let triglycerides = rng.uniform(80.0, 300.0);
        let tabular = TabularFeatures {
            height,
            weight,
            age,
            waist_circumference: waist,
            triglycerides,
            ldl: rng.uniform(60.0, 160.0),
            hdl: rng.uniform(30.0, 70.0),
            vldl: triglycerides / 5.0,
        };
        Self {
            id: format!("S{index:04}"),
            start: Timestamp(start),
            baseline_glucose,
            meals,
            activity_level,
            wake_hour,
            sleep_hour,
            tabular,
            hba1c_baseline: rng.uniform(6.0, 9.5),
        }
    }

    /// A flat patient with no meals; useful as a starting point in tests.
    pub fn flat(id: &str, baseline_glucose: f64) -> Self {
        Self {
            id: id.to_string(),
            start: Timestamp(0),
            baseline_glucose,
            meals: Vec::new(),
            activity_level: 1.0,
            wake_hour: 7.0,
            sleep_hour: 23.0,
            tabular: TabularFeatures {
                height: 1.7,
                weight: 80.0,
                age: 55.0,
                waist_circumference: 0.9,
                triglycerides: 150.0,
                ldl: 100.0,
                hdl: 50.0,
                vldl: 30.0,
            },
            hba1c_baseline: 7.0,
        }
    }

    fn awake(&self, seconds_into_day: f64) -> bool {
        let h = seconds_into_day / 3600.0;
        h >= self.wake_hour && h < self.sleep_hour
    }
}

/// Glucose = baseline + meal excursions + circadian sine + white noise,
/// clamped to `[40, 400]` mg/dL.
pub fn generate_cgm(state: &PatientState, cfg: &SynthConfig, rng: &mut SplitMix64) -> CgmSeries {
    let n = cfg.cgm_len();
    let samples = (0..n)
        .map(|k| {
            let t = (k as i64 * cfg.cgm_interval) as f64;
            let meal: f64 = state.meals.iter().map(|m| m.value(t)).sum();
            let circadian = cfg.circadian_amplitude * (TAU * (t % DAY) / DAY).sin();
            let noise = if cfg.glucose_noise_sd > 0.0 {
                rng.normal(0.0, cfg.glucose_noise_sd)
            } else {
                0.0
            };
            let g = (state.baseline_glucose + meal + circadian + noise).clamp(40.0, 400.0);
            (Timestamp(state.start.0 + k as i64 * cfg.cgm_interval), g)
        })
        .collect();
    CgmSeries::new(state.id.clone(), samples).expect("generated CGM is valid")
}

/// Diurnal activity: bursts of movement while awake, near-stillness asleep.
/// Posture seconds are integers that sum to the epoch length.
pub fn generate_activity(state: &PatientState, cfg: &SynthConfig, rng: &mut SplitMix64) -> ActivitySeries {
    let e = cfg.activity_epoch;
    let ef = e as f64;
    let level = state.activity_level;
    let mut samples = Vec::with_capacity(cfg.activity_len());
    for k in 0..cfg.activity_len() {
        let t = (k as i64 * e) as f64;
        let awake = state.awake(t % DAY);
        let active = awake && rng.bernoulli((0.3 * level).min(0.9));
        let off = if rng.bernoulli(0.05) { rng.below(e as u64 + 1) } else { 0 };
        let rest = e as u64 - off;
        let (sit, std, lie, counts, steps) = if !awake {
            let sit = rng.below(rest / 10 + 1);
            (sit, 0, rest - sit, [rng.uniform(0.0, 5.0), rng.uniform(0.0, 5.0), rng.uniform(0.0, 5.0)], 0.0)
        } else if active {
            let std = rest / 2 + rng.below(rest - rest / 2 + 1);
            let steps = if rng.bernoulli(0.7) {
                (level * rng.uniform(10.0, 50.0) * ef / 30.0).round()
            } else {
                0.0
            };
            (
                rest - std,
                std,
                0,
                [
                    level * rng.uniform(50.0, 400.0),
                    level * rng.uniform(30.0, 300.0),
                    level * rng.uniform(20.0, 200.0),
                ],
                steps,
            )
        } else {
            let std = rng.below(rest / 3 + 1);
            let c = level * 20.0;
            (rest - std, std, 0, [rng.uniform(0.0, c), rng.uniform(0.0, c), rng.uniform(0.0, c)], 0.0)
        };
        let sample = ActivitySample {
            dx: counts[0].round(),
            dy: counts[1].round(),
            dz: counts[2].round(),
            steps,
            i_sit: sit as f64,
            i_std: std as f64,
            i_lie: lie as f64,
            i_off: off as f64,
        };
        // the drop decision is drawn for every epoch so the stream does not
        // depend on earlier drops
        let dropped = rng.bernoulli(cfg.dropout_rate);
        if !dropped {
            samples.push((Timestamp(state.start.0 + k as i64 * e), sample));
        }
    }
    if samples.is_empty() {
        samples.push((state.start, ActivitySample::default()));
    }
    ActivitySeries::new(state.id.clone(), e, samples).expect("generated activity is valid")
}

pub const PLANTED_FEATURE_NAMES: [&str; 5] =
    ["mean_glucose", "glucose_var", "mean_activity", "age", "weight"];

/// Per-patient statistics the planted map is defined over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedFeatures {
    /// mg/dL
    pub mean_glucose: f64,
    /// Population variance, (mg/dL)^2.
    pub glucose_var: f64,
    /// Mean over recorded epochs of `dx + dy + dz`.
    pub mean_activity: f64,
    pub age: f64,
    pub weight: f64,
}

impl PlantedFeatures {
    pub fn compute(cgm: &CgmSeries, act: &ActivitySeries, tab: &TabularFeatures) -> Self {
        let n = cgm.len() as f64;
        let mean = cgm.samples.iter().map(|s| s.1).sum::<f64>() / n;
        let var = cgm.samples.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>() / n;
        let act_mean = act.samples.iter().map(|(_, a)| a.dx + a.dy + a.dz).sum::<f64>() / act.len() as f64;
        Self {
            mean_glucose: mean,
            glucose_var: var,
            mean_activity: act_mean,
            age: tab.age,
            weight: tab.weight,
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.mean_glucose, self.glucose_var, self.mean_activity, self.age, self.weight]
    }
}

/// `delta = intercept + coefficients . features + noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedMap {
    pub intercept: f64,
    pub coefficients: [f64; 5],
}

/// Typical centre and spread of each planted feature under the default
/// generator, used to express the default maps in standardized units.
pub const FEATURE_CENTERS: [f64; 5] = [149.0, 400.0, 105.0, 57.5, 91.0];
pub const FEATURE_SCALES: [f64; 5] = [26.0, 103.0, 65.0, 10.0, 17.0];

/// Default standardized effect sizes for HbA1c change. Sequence statistics
/// dominate; age and weight (visible to the wide branch) contribute less.
pub const DEFAULT_HBA1C_EFFECTS: [f64; 5] = [0.9, 0.15, -0.5, 0.25, 0.35];

impl PlantedMap {
    /// Builds a raw-unit map from effects per standard unit of each feature.
    pub fn from_standardized(effects: [f64; 5], scale: f64) -> Self {
        let mut coefficients = [0.0; 5];
        let mut intercept = 0.0;
        for k in 0..5 {
            coefficients[k] = scale * effects[k] / FEATURE_SCALES[k];
            intercept -= coefficients[k] * FEATURE_CENTERS[k];
        }
        Self {
            intercept,
            coefficients,
        }
    }

    pub fn zero() -> Self {
        Self {
            intercept: 0.0,
            coefficients: [0.0; 5],
        }
    }

    /// Default map for each target; lipid targets reuse the HbA1c pattern in
    /// their own units.
    pub fn default_for(target: Target) -> Self {
        let (effects, scale) = match target {
            Target::HbA1c => (DEFAULT_HBA1C_EFFECTS, 1.0),
            Target::Hdl => ([-0.6, -0.1, 0.7, 0.1, -0.3], 3.0),
            Target::Ldl => ([0.7, 0.1, -0.4, 0.3, 0.4], 8.0),
            Target::Triglycerides => ([0.8, 0.2, -0.6, 0.1, 0.5], 15.0),
        };
        Self::from_standardized(effects, scale)
    }

    pub fn apply(&self, f: &PlantedFeatures) -> f64 {
        let mut acc = self.intercept;
        for (c, x) in self.coefficients.iter().zip(f.to_array()) {
            acc += c * x;
        }
        acc
    }
}

/// Units of each target relative to HbA1c points, for noise scaling.
pub fn target_scale(target: Target) -> f64 {
    match target {
        Target::HbA1c => 1.0,
        Target::Hdl => 3.0,
        Target::Ldl => 8.0,
        Target::Triglycerides => 15.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    pub target: Target,
    pub map: PlantedMap,
    pub features: Vec<PlantedFeatures>,
    pub noise: Vec<f64>,
    pub deltas: Vec<f64>,
    /// The irreducible error: the noise standard deviation.
    pub achievable_rmse: f64,
}

/// Draws `delta_i = map(features_i) + N(0, noise_sd)` for each patient.
pub fn plant_targets(
    target: Target,
    features: &[PlantedFeatures],
    map: &PlantedMap,
    noise_sd: f64,
    rngs: &mut [SplitMix64],
) -> PlantedTruth {
    assert_eq!(features.len(), rngs.len(), "one noise stream per patient");
    let noise: Vec<f64> = rngs
        .iter_mut()
        .map(|r| if noise_sd > 0.0 { r.normal(0.0, noise_sd) } else { 0.0 })
        .collect();
    let deltas = features
        .iter()
        .zip(&noise)
        .map(|(f, e)| map.apply(f) + e)
        .collect();
    PlantedTruth {
        target,
        map: *map,
        features: features.to_vec(),
        noise,
        deltas,
        achievable_rmse: noise_sd,
    }
}

#[derive(Debug, Clone)]
pub struct SynthPatient {
    pub state: PatientState,
    pub cgm: CgmSeries,
    pub activity: ActivitySeries,
    pub features: PlantedFeatures,
    /// Baseline value per target, in [`Target::ALL`] order.
    pub baselines: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub patients: Vec<SynthPatient>,
    /// One entry per target, in [`Target::ALL`] order.
    pub truths: Vec<PlantedTruth>,
}

impl SynthCohort {
    pub fn truth(&self, target: Target) -> &PlantedTruth {
        self.truths.iter().find(|t| t.target == target).expect("all targets planted")
    }
}

pub fn generate_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let patients: Vec<SynthPatient> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| {
            let base = 4 * i as u64;
            let state = PatientState::draw(i, cfg, &mut SplitMix64::derive(cfg.seed, base));
            let cgm = generate_cgm(&state, cfg, &mut SplitMix64::derive(cfg.seed, base + 1));
            let activity = generate_activity(&state, cfg, &mut SplitMix64::derive(cfg.seed, base + 2));
            let features = PlantedFeatures::compute(&cgm, &activity, &state.tabular);
            let tab = &state.tabular;
            let baselines = [state.hba1c_baseline, tab.hdl, tab.ldl, tab.triglycerides];
            SynthPatient {
                state,
                cgm,
                activity,
                features,
                baselines,
            }
        })
        .collect();
    let features: Vec<PlantedFeatures> = patients.iter().map(|p| p.features).collect();
    let truths = Target::ALL
        .iter()
        .enumerate()
        .map(|(k, &target)| {
            let mut rngs: Vec<SplitMix64> = (0..cfg.n_patients)
                .map(|i| {
                    let patient_seed = SplitMix64::derive(cfg.seed, 4 * i as u64 + 3).next_u64();
                    SplitMix64::derive(patient_seed, k as u64)
                })
                .collect();
            plant_targets(
                target,
                &features,
                &PlantedMap::default_for(target),
                cfg.noise_sd * target_scale(target),
                &mut rngs,
            )
        })
        .collect();
    Ok(SynthCohort { patients, truths })
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `cgm/`, `activity/`, `manifest.toml`, `planted_truth.csv` and
/// `planted_coefficients.csv` under `out_dir`. Returns the manifest path.
pub fn write_cohort(cohort: &SynthCohort, cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    let cgm_dir = out_dir.join("cgm");
    let act_dir = out_dir.join("activity");
    for d in [&cgm_dir, &act_dir] {
        std::fs::create_dir_all(d).map_err(io(d))?;
    }
    cohort
        .patients
        .par_iter()
        .try_for_each(|p| -> Result<()> {
            ingest::write_cgm_csv(&p.cgm, &cgm_dir.join(format!("{}.csv", p.state.id)))?;
            ingest::write_activity_csv(&p.activity, &act_dir.join(format!("{}.csv", p.state.id)))?;
            Ok(())
        })?;

    let patients = cohort
        .patients
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let biomarkers = Target::ALL
                .iter()
                .enumerate()
                .map(|(k, &t)| {
                    let baseline = p.baselines[k];
                    let followup = baseline + cohort.truth(t).deltas[i];
                    (
                        t.key().to_string(),
                        BiomarkerEntry {
                            baseline,
                            followup: Some(followup),
                            delta: Some(followup - baseline),
                        },
                    )
                })
                .collect();
            ManifestPatient {
                id: p.state.id.clone(),
                cgm: PathBuf::from("cgm").join(format!("{}.csv", p.state.id)),
                activity: PathBuf::from("activity").join(format!("{}.csv", p.state.id)),
                tabular: p.state.tabular,
                biomarkers,
            }
        })
        .collect();
    let manifest = Manifest {
        activity_epoch: cfg.activity_epoch,
        patients,
    };
    let manifest_path = out_dir.join("manifest.toml");
    manifest.write(&manifest_path)?;

    let truth_path = out_dir.join("planted_truth.csv");
    let mut w = csv::Writer::from_path(&truth_path).map_err(|e| io(&truth_path)(e.into()))?;
    let mut header = vec!["patient_id", "target"];
    header.extend(PLANTED_FEATURE_NAMES);
    header.extend(["noise", "delta"]);
    w.write_record(&header).map_err(|e| io(&truth_path)(e.into()))?;
    for truth in &cohort.truths {
        for (i, p) in cohort.patients.iter().enumerate() {
            let mut row = vec![p.state.id.clone(), truth.target.key().to_string()];
            row.extend(truth.features[i].to_array().iter().map(f64::to_string));
            row.push(truth.noise[i].to_string());
            row.push(truth.deltas[i].to_string());
            w.write_record(&row).map_err(|e| io(&truth_path)(e.into()))?;
        }
    }
    w.flush().map_err(io(&truth_path))?;

    let coef_path = out_dir.join("planted_coefficients.csv");
    let mut w = csv::Writer::from_path(&coef_path).map_err(|e| io(&coef_path)(e.into()))?;
    let mut header = vec!["target", "intercept"];
    header.extend(PLANTED_FEATURE_NAMES);
    header.push("achievable_rmse");
    w.write_record(&header).map_err(|e| io(&coef_path)(e.into()))?;
    for truth in &cohort.truths {
        let mut row = vec![truth.target.key().to_string(), truth.map.intercept.to_string()];
        row.extend(truth.map.coefficients.iter().map(f64::to_string));
        row.push(truth.achievable_rmse.to_string());
        w.write_record(&row).map_err(|e| io(&coef_path)(e.into()))?;
    }
    w.flush().map_err(io(&coef_path))?;
    Ok(manifest_path)
}
