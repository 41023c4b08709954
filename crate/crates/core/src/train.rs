//! Loss, optimizer, fold assignment and cross-validated training.
//!
//! Training is per-example (batch size 1) Adam on the squared error of the raw
//! biomarker delta. Input normalizers are fitted on each fold's training
//! patients only. Each fold uses `seed + fold_index` both to initialize the
//! network ([`SplitMix64`]) and to shuffle examples every epoch ([`Lcg64`],
//! re-shuffling the identity order at each epoch).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{Cohort, TabularFeatures, Target};
use crate::net::{
    model_backward_into, model_forward_tape, ModelParams, ModelShape, NetError, Normalizer, ParamGradients, Sequence, Weights,
    DEFAULT_HIDDEN_DIM, WIDE_WIDTH,
};
use crate::rng::{Lcg64, SplitMix64};
use crate::sync::{fuse_patient, truncate_cohort, FusedSequence, SyncConfig, SyncError, TruncateMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{patients} patients cannot fill {folds} folds")]
    TooFewPatients { patients: usize, folds: usize },
    #[error("patient {patient}: missing {modality} input")]
    MissingModality { patient: String, modality: &'static str },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("non-finite loss {loss} at epoch {epoch} on patient {patient}")]
    DivergedLoss { epoch: usize, patient: String, loss: f64 },
    #[error("inconsistent input shapes: {0}")]
    InconsistentShapes(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    WideOnly,
    DeepCgmOnly,
    DeepCgmActivity,
    WideAndDeep,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::DeepCgmOnly,
        Experiment::DeepCgmActivity,
        Experiment::WideOnly,
        Experiment::WideAndDeep,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Experiment::WideOnly => "wide-only",
            Experiment::DeepCgmOnly => "deep-cgm",
            Experiment::DeepCgmActivity => "deep-cgm-activity",
            Experiment::WideAndDeep => "wide-and-deep",
        }
    }

    /// Input modalities: C (CGM), A (activity), D (demographic), L (lab).
    pub fn signal(self) -> &'static str {
        match self {
            Experiment::WideOnly => "D, L",
            Experiment::DeepCgmOnly => "C",
            Experiment::DeepCgmActivity => "C, A",
            Experiment::WideAndDeep => "C, A, D, L",
        }
    }

    pub fn from_signal(s: &str) -> Option<Self> {
        let norm: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        Self::ALL
            .into_iter()
            .find(|e| e.signal().replace(' ', "") == norm)
    }

    pub fn uses_wide(self) -> bool {
        matches!(self, Experiment::WideOnly | Experiment::WideAndDeep)
    }

    /// Per-timestep feature count of the deep branch, if any.
    pub fn seq_width(self) -> Option<usize> {
        match self {
            Experiment::WideOnly => None,
            Experiment::DeepCgmOnly => Some(1),
            Experiment::DeepCgmActivity | Experiment::WideAndDeep => Some(9),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Experiment {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.key() == s.trim())
            .ok_or_else(|| TrainError::InvalidConfig(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub folds: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub experiment: Experiment,
    pub target: Target,
    pub hidden_dim: usize,
    pub wide_sigmoid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            folds: 5,
            learning_rate: 1e-3,
            seed: 0,
            experiment: Experiment::WideAndDeep,
            target: Target::HbA1c,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            wide_sigmoid: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(TrainError::InvalidConfig(format!("folds must be >= 2, got {}", self.folds)));
        }
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.experiment.seq_width().is_some() && self.hidden_dim == 0 {
            return Err(TrainError::InvalidConfig("hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

pub fn mse_loss(pred: f64, target: f64) -> f64 {
    (pred - target) * (pred - target)
}

/// d/dpred of [`mse_loss`].
pub fn mse_loss_grad(pred: f64, target: f64) -> f64 {
    2.0 * (pred - target)
}

/// One patient after synchronization.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPatient {
    pub id: String,
    pub sequence: Option<FusedSequence>,
    pub tabular: Option<TabularFeatures>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedCohort {
    pub target: Target,
    pub common_length: usize,
    pub patients: Vec<FusedPatient>,
}

impl FusedCohort {
    /// Fuses every patient (in parallel) and truncates to a common length,
    /// capped at `max_len` when given.
    pub fn from_cohort(
        cohort: &Cohort,
        sync: &SyncConfig,
        mode: TruncateMode,
        max_len: Option<usize>,
    ) -> Result<Self> {
        let mut seqs: Vec<FusedSequence> = cohort
            .patients
            .par_iter()
            .map(|p| fuse_patient(&p.cgm, &p.activity, sync))
            .collect::<std::result::Result<_, _>>()?;
        let common_length = truncate_cohort(&mut seqs, mode, max_len)?;
        let patients = cohort
            .patients
            .iter()
            .zip(seqs)
            .map(|(p, s)| FusedPatient {
                id: p.id.clone(),
                sequence: Some(s),
                tabular: Some(p.tabular),
                target: p.target.delta,
            })
            .collect();
        Ok(Self {
            target: cohort.target,
            common_length,
            patients,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.id.clone()).collect()
    }
}

pub const FUSED_COHORT_FILE: &str = "cohort.csv";
pub const FUSED_SUMMARY_FILE: &str = "summary.txt";
pub const FUSED_SEQ_DIR: &str = "fused";

fn io_err(path: &Path) -> impl Fn(String) -> TrainError + '_ {
    move |reason| TrainError::Io {
        path: path.display().to_string(),
        reason,
    }
}

/// Writes `summary.txt` (target, common length, patient count),
/// `cohort.csv` (id, delta, tabular features) and one `fused/<id>.csv` per
/// patient.
pub fn write_fused_cohort(cohort: &FusedCohort, dir: &Path) -> Result<()> {
    let seq_dir = dir.join(FUSED_SEQ_DIR);
    std::fs::create_dir_all(&seq_dir).map_err(|e| io_err(&seq_dir)(e.to_string()))?;
    let summary = dir.join(FUSED_SUMMARY_FILE);
    let text = format!(
        "target = {}\ncommon_length = {}\npatients = {}\n",
        cohort.target.key(),
        cohort.common_length,
        cohort.patients.len()
    );
    std::fs::write(&summary, text).map_err(|e| io_err(&summary)(e.to_string()))?;

    let table = dir.join(FUSED_COHORT_FILE);
    let err = io_err(&table);
    let mut w = csv::Writer::from_path(&table).map_err(|e| err(e.to_string()))?;
    let mut header = vec!["patient_id", "delta"];
    header.extend(TabularFeatures::FIELD_NAMES);
    w.write_record(&header).map_err(|e| err(e.to_string()))?;
    for p in &cohort.patients {
        let tab = p.tabular.ok_or_else(|| TrainError::MissingModality {
            patient: p.id.clone(),
            modality: "tabular",
        })?;
        let mut rec = vec![p.id.clone(), p.target.to_string()];
        rec.extend(tab.to_array().iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| err(e.to_string()))?;
        let seq = p.sequence.as_ref().ok_or_else(|| TrainError::MissingModality {
            patient: p.id.clone(),
            modality: "sequence",
        })?;
        crate::sync::write_fused_csv(seq, &seq_dir.join(format!("{}.csv", p.id)))?;
    }
    w.flush().map_err(|e| err(e.to_string()))
}

pub fn read_fused_cohort(dir: &Path) -> Result<FusedCohort> {
    let summary = dir.join(FUSED_SUMMARY_FILE);
    let err = io_err(&summary);
    let text = std::fs::read_to_string(&summary).map_err(|e| err(e.to_string()))?;
    let mut target = None;
    let mut common_length = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("bad line `{line}`")))?;
        match k.trim() {
            "target" => target = Some(v.trim().parse::<Target>().map_err(|e| err(e.to_string()))?),
            "common_length" => {
                common_length = Some(v.trim().parse::<usize>().map_err(|e| err(e.to_string()))?)
            }
            _ => {}
        }
    }
    let target = target.ok_or_else(|| err("missing target".into()))?;
    let common_length = common_length.ok_or_else(|| err("missing common_length".into()))?;

    let table = dir.join(FUSED_COHORT_FILE);
    let err = io_err(&table);
    let mut r = csv::Reader::from_path(&table).map_err(|e| err(e.to_string()))?;
    let mut patients = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 2 + TabularFeatures::WIDTH {
            return Err(err(format!("expected {} fields, found {}", 2 + TabularFeatures::WIDTH, rec.len())));
        }
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| err(format!("bad number `{}`", &rec[i]))) };
        let id = rec[0].to_string();
        let mut tab = [0.0; TabularFeatures::WIDTH];
        for (k, v) in tab.iter_mut().enumerate() {
            *v = num(2 + k)?;
        }
        let seq = crate::sync::read_fused_csv(&id, &dir.join(FUSED_SEQ_DIR).join(format!("{id}.csv")))?;
        if seq.len() != common_length {
            return Err(TrainError::InconsistentShapes(format!(
                "patient {id} has {} fused samples, summary says {common_length}",
                seq.len()
            )));
        }
        patients.push(FusedPatient {
            target: num(1)?,
            tabular: Some(TabularFeatures::from_array(tab)),
            sequence: Some(seq),
            id,
        });
    }
    Ok(FusedCohort {
        target,
        common_length,
        patients,
    })
}

/// Model-ready inputs for one patient (raw, not yet normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub patient_id: String,
    pub sequence: Option<Sequence>,
    pub tabular: Option<[f64; WIDE_WIDTH]>,
    pub target: f64,
}

pub fn build_inputs(cohort: &FusedCohort, experiment: Experiment) -> Result<Vec<Example>> {
    cohort
        .patients
        .iter()
        .map(|p| {
            let sequence = match experiment.seq_width() {
                None => None,
                Some(width) => {
                    let seq = p.sequence.as_ref().ok_or_else(|| TrainError::MissingModality {
                        patient: p.id.clone(),
                        modality: "sequence",
                    })?;
                    let data: Vec<f64> = if width == 1 {
                        seq.samples.iter().map(|s| s.glucose).collect()
                    } else {
                        seq.samples.iter().flat_map(|s| s.features()).collect()
                    };
                    Some(Sequence::new(seq.len(), width, data)?)
                }
            };
            let tabular = if experiment.uses_wide() {
                let t = p.tabular.as_ref().ok_or_else(|| TrainError::MissingModality {
                    patient: p.id.clone(),
                    modality: "tabular",
                })?;
                Some(t.to_array())
            } else {
                None
            };
            Ok(Example {
                patient_id: p.id.clone(),
                sequence,
                tabular,
                target: p.target,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: usize,
    /// Fold index of each patient, aligned with the id list it was built from.
    pub assignment: Vec<usize>,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.folds];
        for &f in &self.assignment {
            s[f] += 1;
        }
        s
    }
}

/// Sorts ids, shuffles them with `Lcg64::new(seed)`, and deals position `k`
/// to fold `k % folds`. Depends only on the set of ids and the seed.
pub fn make_folds(patient_ids: &[String], folds: usize, seed: u64) -> Result<FoldAssignment> {
    if folds < 2 {
        return Err(TrainError::InvalidConfig(format!("folds must be >= 2, got {folds}")));
    }
    if patient_ids.len() < folds {
        return Err(TrainError::TooFewPatients {
            patients: patient_ids.len(),
            folds,
        });
    }
    let mut order: Vec<usize> = (0..patient_ids.len()).collect();
    order.sort_by(|&a, &b| patient_ids[a].cmp(&patient_ids[b]));
    Lcg64::new(seed).shuffle(&mut order);
    let mut assignment = vec![0; patient_ids.len()];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % folds;
    }
    Ok(FoldAssignment { folds, assignment })
}

/// Adam with the conventional decay rates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, param_count: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn update(&mut self, params: &mut Weights, grads: &ParamGradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let mut k = 0;
        for (p, g) in params.slices_mut().into_iter().zip(grads.slices()) {
            for (pi, &gi) in p.iter_mut().zip(g) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *pi -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                k += 1;
            }
        }
    }
}

fn fit_normalizers(train: &[&Example]) -> (Vec<Normalizer>, Vec<Normalizer>) {
    let seq = match train[0].sequence.as_ref() {
        Some(s0) => (0..s0.width)
            .map(|f| {
                Normalizer::fit(train.iter().flat_map(|e| {
                    let s = e.sequence.as_ref().expect("checked shape");
                    s.data.iter().skip(f).step_by(s.width).copied()
                }))
            })
            .collect(),
        None => Vec::new(),
    };
    let tab = match train[0].tabular {
        Some(_) => (0..WIDE_WIDTH)
            .map(|f| Normalizer::fit(train.iter().map(|e| e.tabular.expect("checked shape")[f])))
            .collect(),
        None => Vec::new(),
    };
    (seq, tab)
}

fn check_shapes(examples: &[&Example]) -> Result<ModelShapeInfo> {
    let first = examples.first().ok_or(TrainError::EmptyTrainingSet)?;
    let seq = first.sequence.as_ref().map(|s| (s.width, s.len));
    let wide = first.tabular.is_some();
    for e in examples {
        let s = e.sequence.as_ref().map(|s| (s.width, s.len));
        if s != seq || e.tabular.is_some() != wide {
            return Err(TrainError::InconsistentShapes(format!(
                "patient {} has sequence {:?} / tabular {}, expected {:?} / {}",
                e.patient_id,
                s,
                e.tabular.is_some(),
                seq,
                wide
            )));
        }
    }
    if seq.is_none() && !wide {
        return Err(TrainError::InconsistentShapes("no model inputs".into()));
    }
    Ok(ModelShapeInfo { seq, wide })
}

struct ModelShapeInfo {
    seq: Option<(usize, usize)>,
    wide: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains one model on `train` for `cfg.epochs` passes.
pub fn train_fold(train: &[&Example], cfg: &TrainConfig, fold_seed: u64) -> Result<TrainedModel> {
    cfg.validate()?;
    let shape = check_shapes(train)?;
    let (seq_norm, tab_norm) = fit_normalizers(train);
    let mut params = ModelParams::init(
        ModelShape {
            deep: shape.seq,
            hidden_dim: cfg.hidden_dim,
            wide: shape.wide,
        },
        &mut SplitMix64::new(fold_seed),
    );
    params.normalizers.sequence = seq_norm;
    params.normalizers.tabular = tab_norm;
    params.wide_sigmoid = cfg.wide_sigmoid;

    let normalized: Vec<(Option<Sequence>, Option<[f64; WIDE_WIDTH]>)> = train
        .iter()
        .map(|e| params.normalize(e.sequence.as_ref(), e.tabular.as_ref()))
        .collect::<std::result::Result<_, _>>()?;

    let mut adam = Adam::new(cfg.learning_rate, params.weights.param_count());
    let mut shuffle = Lcg64::new(fold_seed);
    let mut grads = params.weights.zeros_like();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            let (seq, tab) = &normalized[i];
            let (pred, tape) = model_forward_tape(&params, seq.as_ref(), tab.as_ref())?;
            let loss = mse_loss(pred, train[i].target);
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss {
                    epoch,
                    patient: train[i].patient_id.clone(),
                    loss,
                });
            }
            total += loss;
            for s in grads.slices_mut() {
                s.fill(0.0);
            }
            model_backward_into(&params, &tape, mse_loss_grad(pred, train[i].target), &mut grads)?;
            adam.update(&mut params.weights, &grads);
        }
        let mean = total / train.len() as f64;
        log::debug!("seed {fold_seed} epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainedModel { params, epoch_losses })
}

pub fn predict(params: &ModelParams, example: &Example) -> Result<f64> {
    Ok(params.predict(example.sequence.as_ref(), example.tabular.as_ref())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OofPrediction {
    pub patient_id: String,
    pub fold: usize,
    pub target: Target,
    pub true_delta: f64,
    pub pred_delta: f64,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub model: TrainedModel,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    /// One per example, in input order.
    pub predictions: Vec<OofPrediction>,
}

/// Trains one model per fold (folds run in parallel) and predicts each
/// held-out fold.
pub fn cross_validate(examples: &[Example], cfg: &TrainConfig) -> Result<CvOutcome> {
    cfg.validate()?;
    let ids: Vec<String> = examples.iter().map(|e| e.patient_id.clone()).collect();
    let folds = make_folds(&ids, cfg.folds, cfg.seed)?;
    let results: Vec<(FoldResult, Vec<(usize, f64)>)> = (0..cfg.folds)
        .into_par_iter()
        .map(|k| {
            let test = folds.members(k);
            let train: Vec<&Example> = (0..examples.len())
                .filter(|&i| folds.assignment[i] != k)
                .map(|i| &examples[i])
                .collect();
            let model = train_fold(&train, cfg, cfg.seed.wrapping_add(k as u64))?;
            let preds = test
                .iter()
                .map(|&i| Ok((i, predict(&model.params, &examples[i])?)))
                .collect::<Result<Vec<_>>>()?;
            log::info!(
                "fold {k}: trained on {} patients, final loss {:.6}",
                train.len(),
                model.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
            Ok((
                FoldResult {
                    fold: k,
                    model,
                    train_ids: train.iter().map(|e| e.patient_id.clone()).collect(),
                    test_ids: test.iter().map(|&i| ids[i].clone()).collect(),
                },
                preds,
            ))
        })
        .collect::<Result<_>>()?;

    let mut pred = vec![f64::NAN; examples.len()];
    let mut fold_results = Vec::with_capacity(results.len());
    for (fr, preds) in results {
        for (i, p) in preds {
            pred[i] = p;
        }
        fold_results.push(fr);
    }
    let predictions = examples
        .iter()
        .enumerate()
        .map(|(i, e)| OofPrediction {
            patient_id: e.patient_id.clone(),
            fold: folds.assignment[i],
            target: cfg.target,
            true_delta: e.target,
            pred_delta: pred[i],
        })
        .collect();
    Ok(CvOutcome {
        folds: fold_results,
        predictions,
    })
}

pub const PREDICTIONS_HEADER: [&str; 5] = ["patient_id", "fold", "target", "true_delta", "pred_delta"];

pub fn write_predictions(preds: &[OofPrediction], path: &Path) -> Result<()> {
    let io = |e: csv::Error| TrainError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(PREDICTIONS_HEADER).map_err(io)?;
    for p in preds {
        w.write_record([
            p.patient_id.clone(),
            p.fold.to_string(),
            p.target.key().to_string(),
            p.true_delta.to_string(),
            p.pred_delta.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| io(e.into()))
}

pub fn read_predictions(path: &Path) -> Result<Vec<OofPrediction>> {
    let err = |reason: String| TrainError::Io {
        path: path.display().to_string(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != PREDICTIONS_HEADER {
        return Err(err(format!("unexpected header {}", header.join(","))));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or_default();
            let bad = |what: &str| err(format!("bad {what} in row {rec:?}"));
            Ok(OofPrediction {
                patient_id: field(0).to_string(),
                fold: field(1).parse().map_err(|_| bad("fold"))?,
                target: field(2).parse().map_err(|_| bad("target"))?,
                true_delta: field(3).parse().map_err(|_| bad("true_delta"))?,
                pred_delta: field(4).parse().map_err(|_| bad("pred_delta"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("P{i:03}")).collect()
    }

    #[test]
    fn mse_values() {
        assert_eq!(mse_loss(2.0, 2.0), 0.0);
        assert_eq!(mse_loss(3.0, 1.0), 4.0);
        assert_eq!(mse_loss_grad(3.0, 1.0), 4.0);
        let h = 1e-6;
        let fd = (mse_loss(3.0 + h, 1.0) - mse_loss(3.0 - h, 1.0)) / (2.0 * h);
        assert!((fd - 4.0).abs() < 1e-8);
    }

    #[test]
    fn folds_balanced() {
        let f = make_folds(&ids(50), 5, 1).unwrap();
        assert_eq!(f.sizes(), vec![10; 5]);
        let f = make_folds(&ids(7), 5, 1).unwrap();
        assert_eq!(f.sizes(), vec![2, 2, 1, 1, 1]);
    }

    #[test]
    fn folds_deterministic_and_order_free() {
        let a = make_folds(&ids(23), 5, 9).unwrap();
        assert_eq!(a, make_folds(&ids(23), 5, 9).unwrap());
        assert_ne!(a, make_folds(&ids(23), 5, 10).unwrap());
        let mut rev = ids(23);
        rev.reverse();
        let b = make_folds(&rev, 5, 9).unwrap();
        for i in 0..23 {
            assert_eq!(a.assignment[i], b.assignment[22 - i]);
        }
    }

    #[test]
    fn folds_errors() {
        assert!(matches!(
            make_folds(&ids(3), 5, 0),
            Err(TrainError::TooFewPatients { patients: 3, folds: 5 })
        ));
        assert!(make_folds(&ids(3), 1, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        let bad = TrainConfig {
            folds: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn experiment_keys() {
        for e in Experiment::ALL {
            assert_eq!(e.key().parse::<Experiment>().unwrap(), e);
            assert_eq!(Experiment::from_signal(e.signal()), Some(e));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ModelParams::zeros(ModelShape {
            deep: None,
            hidden_dim: 0,
            wide: true,
        });
        let mut g = p.weights.zeros_like();
        g.wide.as_mut().unwrap().bias = 3.0;
        g.wide.as_mut().unwrap().weights[0] = -0.5;
        let mut adam = Adam::new(0.01, p.weights.param_count());
        adam.update(&mut p.weights, &g);
        let w = p.weights.wide.as_ref().unwrap();
        assert!((w.bias + 0.01).abs() < 1e-9);
        assert!((w.weights[0] - 0.01).abs() < 1e-9);
        assert_eq!(w.weights[1], 0.0);
    }
}
