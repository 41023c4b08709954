//! CGM / activity synchronization.
//!
//! Every CGM reading that lies inside the activity recording span is paired
//! with the element-wise mean of the `|W|` activity epochs closest to it in
//! time, giving a 9-feature sample (glucose followed by the eight averaged
//! activity fields). Per-patient sequences are then cut to a common length.

use std::path::Path;

use thiserror::Error;

use crate::ingest::{ActivitySample, ActivitySeries, CgmSeries, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum SyncError {
    #[error("all inputs must be positive (cgm_interval={cgm_interval}, activity_epoch={activity_epoch}, overlap_ratio={overlap_ratio})")]
    NonPositiveInput {
        cgm_interval: f64,
        activity_epoch: f64,
        overlap_ratio: f64,
    },
    #[error("cgm interval {cgm_interval} s is shorter than the activity epoch {activity_epoch} s")]
    IntervalShorterThanEpoch { cgm_interval: f64, activity_epoch: f64 },
    #[error("overlap ratio {0} outside (0, 1]")]
    BadOverlapRatio(f64),
    #[error("window size rounds to zero")]
    ZeroWindow,
    #[error("patient {0}: no CGM reading falls inside the activity span")]
    EmptyAfterTrim(String),
    #[error("window of {window} needs at least that many activity samples, found {available}")]
    InsufficientActivitySamples { window: usize, available: usize },
    #[error("empty averaging window")]
    EmptyWindow,
    #[error("activity index {index} out of range ({len} samples)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("no sequences to truncate")]
    EmptyCohort,
    #[error("patient id mismatch: cgm `{cgm}` vs activity `{activity}`")]
    PatientMismatch { cgm: String, activity: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, SyncError>;

/// `round((cgm_interval / activity_epoch) / overlap_ratio)`, rounding half
/// away from zero.
pub fn compute_window_size(cgm_interval: f64, activity_epoch: f64, overlap_ratio: f64) -> Result<usize> {
    let all_positive = [cgm_interval, activity_epoch, overlap_ratio]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0);
    if !all_positive {
        return Err(SyncError::NonPositiveInput {
            cgm_interval,
            activity_epoch,
            overlap_ratio,
        });
    }
    if overlap_ratio > 1.0 {
        return Err(SyncError::BadOverlapRatio(overlap_ratio));
    }
    if cgm_interval < activity_epoch {
        return Err(SyncError::IntervalShorterThanEpoch {
            cgm_interval,
            activity_epoch,
        });
    }
    // f64::round is half-away-from-zero
    let w = ((cgm_interval / activity_epoch) / overlap_ratio).round();
    if w < 1.0 {
        return Err(SyncError::ZeroWindow);
    }
    Ok(w as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncConfig {
    pub overlap_ratio: f64,
    pub cgm_interval: i64,
    pub activity_epoch: i64,
    pub window_size: usize,
}

impl SyncConfig {
    pub fn new(cgm_interval: i64, activity_epoch: i64, overlap_ratio: f64) -> Result<Self> {
        let window_size =
            compute_window_size(cgm_interval as f64, activity_epoch as f64, overlap_ratio)?;
        Ok(Self {
            overlap_ratio,
            cgm_interval,
            activity_epoch,
            window_size,
        })
    }

    /// Explicit window size, bypassing the interval-ratio rule.
    pub fn with_window(window_size: usize) -> Result<Self> {
        if window_size == 0 {
            return Err(SyncError::ZeroWindow);
        }
        Ok(Self {
            window_size,
            ..Self::default()
        })
    }
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self::new(300, 30, 0.5).expect("default sync config is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedSample {
    pub timestamp: Timestamp,
    pub glucose: f64,
    pub avg_activity: [f64; 8],
}

impl FusedSample {
    pub const WIDTH: usize = 9;

    pub fn features(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out[0] = self.glucose;
        out[1..].copy_from_slice(&self.avg_activity);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedSequence {
    pub patient_id: String,
    pub samples: Vec<FusedSample>,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Keeps the CGM points inside `[first activity, last activity]`.
pub fn trim_uncovered_cgm(cgm: &CgmSeries, act: &ActivitySeries) -> Result<CgmSeries> {
    if cgm.is_empty() || act.is_empty() {
        return Err(SyncError::EmptyAfterTrim(cgm.patient_id.clone()));
    }
    let (lo, hi) = (act.first_time(), act.last_time());
    let samples: Vec<_> = cgm
        .samples
        .iter()
        .copied()
        .filter(|(t, _)| *t >= lo && *t <= hi)
        .collect();
    if samples.is_empty() {
        return Err(SyncError::EmptyAfterTrim(cgm.patient_id.clone()));
    }
    Ok(CgmSeries {
        patient_id: cgm.patient_id.clone(),
        samples,
        nominal_spacing: cgm.nominal_spacing,
    })
}

/// Indices (ascending) of the `w` activity samples closest to `t`. Ties go to
/// the earlier timestamp.
///
/// Timestamps are sorted, so the nearest set is a contiguous run; it is grown
/// outward from the insertion point of `t`.
pub fn nearest_activity_window(
    act: &ActivitySeries,
    t: Timestamp,
    w: usize,
) -> Result<std::ops::Range<usize>> {
    let times: Vec<Timestamp> = act.samples.iter().map(|s| s.0).collect();
    nearest_window_in(&times, t, w)
}

fn nearest_window_in(times: &[Timestamp], t: Timestamp, w: usize) -> Result<std::ops::Range<usize>> {
    if w == 0 {
        return Err(SyncError::EmptyWindow);
    }
    if times.len() < w {
        return Err(SyncError::InsufficientActivitySamples {
            window: w,
            available: times.len(),
        });
    }
    // [lo, hi) is the current window; lo..hi starts empty at the split point
    let split = times.partition_point(|&x| x < t);
    let (mut lo, mut hi) = (split, split);
    while hi - lo < w {
        let take_left = match (lo > 0, hi < times.len()) {
            (true, true) => times[lo - 1].abs_diff(t) <= times[hi].abs_diff(t),
            (true, false) => true,
            (false, true) => false,
            (false, false) => unreachable!("window larger than series"),
        };
        if take_left {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    Ok(lo..hi)
}

/// Element-wise mean of the selected samples, summed in the given order.
pub fn average_window(act: &ActivitySeries, indices: &[usize]) -> Result<[f64; 8]> {
    if indices.is_empty() {
        return Err(SyncError::EmptyWindow);
    }
    let mut acc = [0.0; 8];
    for &i in indices {
        let s = act.samples.get(i).ok_or(SyncError::IndexOutOfRange {
            index: i,
            len: act.len(),
        })?;
        for (a, v) in acc.iter_mut().zip(s.1.to_array()) {
            *a += v;
        }
    }
    let n = indices.len() as f64;
    Ok(acc.map(|a| a / n))
}

fn average_range(samples: &[(Timestamp, ActivitySample)], range: std::ops::Range<usize>) -> [f64; 8] {
    let n = range.len() as f64;
    let mut acc = [0.0; 8];
    for (_, s) in &samples[range] {
        for (a, v) in acc.iter_mut().zip(s.to_array()) {
            *a += v;
        }
    }
    acc.map(|a| a / n)
}

/// Synchronizes one patient's streams into a fused sequence.
pub fn fuse_patient(cgm: &CgmSeries, act: &ActivitySeries, cfg: &SyncConfig) -> Result<FusedSequence> {
    if cgm.patient_id != act.patient_id {
        return Err(SyncError::PatientMismatch {
            cgm: cgm.patient_id.clone(),
            activity: act.patient_id.clone(),
        });
    }
    let trimmed = trim_uncovered_cgm(cgm, act)?;
    let w = cfg.window_size;
    let times: Vec<Timestamp> = act.samples.iter().map(|s| s.0).collect();
    let nominal_extent = (w.saturating_sub(1) as u64) * act.epoch_length as u64;
    let mut stretched = 0usize;
    let mut samples = Vec::with_capacity(trimmed.len());
    for &(t, glucose) in &trimmed.samples {
        let range = nearest_window_in(&times, t, w)?;
        let extent = times[range.end - 1].abs_diff(times[range.start]);
        if nominal_extent > 0 && extent > 2 * nominal_extent {
            stretched += 1;
        }
        samples.push(FusedSample {
            timestamp: t,
            glucose,
            avg_activity: average_range(&act.samples, range),
        });
    }
    if stretched > 0 {
        log::warn!(
            "patient {}: {} of {} windows span more than twice the nominal {} s",
            cgm.patient_id,
            stretched,
            samples.len(),
            nominal_extent
        );
    }
    Ok(FusedSequence {
        patient_id: cgm.patient_id.clone(),
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TruncateMode {
    /// Keep the first `common_length` samples.
    #[default]
    EarliestPrefix,
    /// Keep the last `common_length` samples.
    LatestSuffix,
}

/// Cuts every sequence to the shortest length in the cohort, optionally capped
/// at `max_len`. Returns the common length.
pub fn truncate_cohort(
    sequences: &mut [FusedSequence],
    mode: TruncateMode,
    max_len: Option<usize>,
) -> Result<usize> {
    let min = sequences
        .iter()
        .map(FusedSequence::len)
        .min()
        .ok_or(SyncError::EmptyCohort)?;
    let common = max_len.map_or(min, |m| m.min(min));
    for seq in sequences.iter_mut() {
        match mode {
            TruncateMode::EarliestPrefix => seq.samples.truncate(common),
            TruncateMode::LatestSuffix => {
                let drop = seq.samples.len() - common;
                seq.samples.drain(..drop);
            }
        }
    }
    Ok(common)
}

pub const FUSED_HEADER: [&str; 10] = [
    "timestamp", "glucose", "dx", "dy", "dz", "steps", "i_sit", "i_std", "i_lie", "i_off",
];

pub fn write_fused_csv(seq: &FusedSequence, path: &Path) -> Result<()> {
    let io = |e: csv::Error| SyncError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(FUSED_HEADER).map_err(io)?;
    for s in &seq.samples {
        let mut row = vec![s.timestamp.0.to_string(), s.glucose.to_string()];
        row.extend(s.avg_activity.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| io(e.into()))
}

pub fn read_fused_csv(patient_id: &str, path: &Path) -> Result<FusedSequence> {
    let io = |reason: String| SyncError::Io {
        path: path.display().to_string(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| io(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| io(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != FUSED_HEADER {
        return Err(io(format!("unexpected header {}", header.join(","))));
    }
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| io(format!("bad field {i} in {rec:?}")))
        };
        let ts: i64 = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| io(format!("bad timestamp in {rec:?}")))?;
        let glucose = num(1)?;
        let mut avg = [0.0; 8];
        for (k, a) in avg.iter_mut().enumerate() {
            *a = num(k + 2)?;
        }
        samples.push(FusedSample {
            timestamp: Timestamp(ts),
            glucose,
            avg_activity: avg,
        });
    }
    Ok(FusedSequence {
        patient_id: patient_id.to_string(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ActivitySample;

    fn act_at(times: &[i64]) -> ActivitySeries {
        let samples = times
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let mut s = ActivitySample::default();
                s.steps = k as f64;
                (Timestamp(t), s)
            })
            .collect();
        ActivitySeries::new("P", 30, samples).unwrap()
    }

    fn cgm_at(times: &[i64]) -> CgmSeries {
        CgmSeries::new(
            "P",
            times.iter().map(|&t| (Timestamp(t), 100.0 + t as f64)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn window_sizes() {
        assert_eq!(compute_window_size(300.0, 30.0, 0.5), Ok(20));
        assert_eq!(compute_window_size(300.0, 30.0, 1.0), Ok(10));
        assert_eq!(compute_window_size(120.0, 30.0, 0.5), Ok(8));
        // 2.5 rounds away from zero
        assert_eq!(compute_window_size(75.0, 30.0, 1.0), Ok(3));
        assert!(matches!(
            compute_window_size(0.0, 30.0, 0.5),
            Err(SyncError::NonPositiveInput { .. })
        ));
        assert!(matches!(
            compute_window_size(300.0, 30.0, -0.5),
            Err(SyncError::NonPositiveInput { .. })
        ));
        assert!(compute_window_size(10.0, 30.0, 0.5).is_err());
        assert_eq!(SyncConfig::default().window_size, 20);
    }

    #[test]
    fn trim_keeps_points_inside_span() {
        let out = trim_uncovered_cgm(&cgm_at(&[0, 300, 600]), &act_at(&[100, 500])).unwrap();
        let ts: Vec<i64> = out.samples.iter().map(|s| s.0 .0).collect();
        assert_eq!(ts, vec![300]);

        let cgm = cgm_at(&[300, 600]);
        assert_eq!(trim_uncovered_cgm(&cgm, &act_at(&[0, 900])).unwrap(), cgm);

        assert!(matches!(
            trim_uncovered_cgm(&cgm_at(&[0, 300]), &act_at(&[1000, 1030])),
            Err(SyncError::EmptyAfterTrim(_))
        ));
    }

    #[test]
    fn trim_includes_span_endpoints() {
        let out = trim_uncovered_cgm(&cgm_at(&[100, 300, 500]), &act_at(&[100, 500])).unwrap();
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn nearest_window_examples() {
        let act = act_at(&[0, 30, 60, 90, 120]);
        assert_eq!(nearest_activity_window(&act, Timestamp(60), 3).unwrap(), 1..4);
        assert_eq!(nearest_activity_window(&act, Timestamp(60), 5).unwrap(), 0..5);
        assert_eq!(nearest_activity_window(&act, Timestamp(45), 1).unwrap(), 1..2);
        // before the first / after the last sample
        assert_eq!(nearest_activity_window(&act, Timestamp(-100), 2).unwrap(), 0..2);
        assert_eq!(nearest_activity_window(&act, Timestamp(500), 2).unwrap(), 3..5);
        assert!(matches!(
            nearest_activity_window(&act, Timestamp(0), 6),
            Err(SyncError::InsufficientActivitySamples { .. })
        ));
    }

    #[test]
    fn average_examples() {
        let v = ActivitySample::from_array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 0.5]);
        let act = ActivitySeries::new("P", 30, (0..4).map(|k| (Timestamp(k * 30), v)).collect()).unwrap();
        assert_eq!(average_window(&act, &[0, 1, 2, 3]).unwrap(), v.to_array());

        let mk = |a: [f64; 8]| ActivitySample::from_array(a);
        let act = ActivitySeries::new(
            "P",
            30,
            vec![
                (Timestamp(0), mk([2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])),
                (Timestamp(30), mk([4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])),
            ],
        )
        .unwrap();
        assert_eq!(average_window(&act, &[0, 1]).unwrap(), [3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let steps = [1.0, 2.0, 3.0, 10.0];
        let act = ActivitySeries::new(
            "P",
            30,
            steps
                .iter()
                .enumerate()
                .map(|(k, &s)| {
                    let mut a = ActivitySample::default();
                    a.steps = s;
                    (Timestamp(k as i64 * 30), a)
                })
                .collect(),
        )
        .unwrap();
        // (1 + 2 + 3 + 10) / 4
        assert_eq!(average_window(&act, &[0, 1, 2, 3]).unwrap()[3], 4.0);

        assert_eq!(average_window(&act, &[]), Err(SyncError::EmptyWindow));
        assert!(matches!(
            average_window(&act, &[9]),
            Err(SyncError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn fuse_constant_activity() {
        let v = ActivitySample::from_array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let act = ActivitySeries::new("P", 30, (0..40).map(|k| (Timestamp(k * 30), v)).collect()).unwrap();
        let cgm = cgm_at(&[300, 600, 900]);
        let fused = fuse_patient(&cgm, &act, &SyncConfig::default()).unwrap();
        assert_eq!(fused.len(), 3);
        for (s, c) in fused.samples.iter().zip(&cgm.samples) {
            assert_eq!(s.timestamp, c.0);
            assert_eq!(s.glucose, c.1);
            assert_eq!(s.avg_activity, v.to_array());
        }
    }

    #[test]
    fn fuse_window_centred_on_nearest_epoch() {
        // the window straddles the CGM point symmetrically when it is interior
        let act = act_at(&(0..100).map(|k| k * 30).collect::<Vec<_>>());
        let cgm = cgm_at(&[1500]);
        let cfg = SyncConfig::with_window(5).unwrap();
        let fused = fuse_patient(&cgm, &act, &cfg).unwrap();
        // epochs 48..=52 carry steps 48..=52
        assert_eq!(fused.samples[0].avg_activity[3], 50.0);
    }

    #[test]
    fn consecutive_default_windows_share_ten_epochs() {
        let act = act_at(&(0..200).map(|k| k * 30).collect::<Vec<_>>());
        let cfg = SyncConfig::default();
        let a = nearest_activity_window(&act, Timestamp(1500), cfg.window_size).unwrap();
        let b = nearest_activity_window(&act, Timestamp(1800), cfg.window_size).unwrap();
        let shared = a.end.min(b.end) - a.start.max(b.start);
        assert_eq!(shared, 10);
    }

    #[test]
    fn truncate_examples() {
        let mk = |n: usize| FusedSequence {
            patient_id: format!("P{n}"),
            samples: (0..n)
                .map(|k| FusedSample {
                    timestamp: Timestamp(k as i64),
                    glucose: k as f64 + 1.0,
                    avg_activity: [0.0; 8],
                })
                .collect(),
        };
        let mut seqs = vec![mk(1445), mk(1500), mk(2016)];
        assert_eq!(truncate_cohort(&mut seqs, TruncateMode::EarliestPrefix, None), Ok(1445));
        assert!(seqs.iter().all(|s| s.len() == 1445));

        let mut one = vec![mk(7)];
        let before = one.clone();
        assert_eq!(truncate_cohort(&mut one, TruncateMode::EarliestPrefix, None), Ok(7));
        assert_eq!(one, before);

        let mut seqs = vec![mk(3), mk(5)];
        truncate_cohort(&mut seqs, TruncateMode::EarliestPrefix, None).unwrap();
        let g: Vec<f64> = seqs[1].samples.iter().map(|s| s.glucose).collect();
        assert_eq!(g, vec![1.0, 2.0, 3.0]);

        let mut seqs = vec![mk(3), mk(5)];
        truncate_cohort(&mut seqs, TruncateMode::LatestSuffix, None).unwrap();
        let g: Vec<f64> = seqs[1].samples.iter().map(|s| s.glucose).collect();
        assert_eq!(g, vec![3.0, 4.0, 5.0]);

        let mut seqs = vec![mk(10), mk(12)];
        assert_eq!(truncate_cohort(&mut seqs, TruncateMode::EarliestPrefix, Some(4)), Ok(4));

        assert_eq!(
            truncate_cohort(&mut [], TruncateMode::EarliestPrefix, None),
            Err(SyncError::EmptyCohort)
        );
    }
}
