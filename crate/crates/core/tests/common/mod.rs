//! Helpers shared by integration test targets.
#![allow(dead_code)]

use cgm_wide_deep::ingest::{ActivitySample, ActivitySeries, CgmSeries, Timestamp};
use cgm_wide_deep::net::{model_backward, model_forward, model_forward_tape, ModelParams, ModelShape, Sequence};
use cgm_wide_deep::rng::SplitMix64;
use cgm_wide_deep::sync::SyncConfig;

pub struct SyncInstance {
    pub cgm: CgmSeries,
    pub activity: ActivitySeries,
    pub window: usize,
}

/// Irregular timestamps on a 10 s grid so that equidistant ties are common.
pub fn random_sync_instance(rng: &mut SplitMix64) -> SyncInstance {
    let window = 1 + rng.below(8) as usize;
    let m = window + rng.below((300 - window + 1) as u64) as usize;
    let mut t = 1_000_000i64;
    let mut act = Vec::with_capacity(m);
    for _ in 0..m {
        let sample = ActivitySample::from_array(std::array::from_fn(|k| rng.uniform(0.0, if k < 4 { 100.0 } else { 7.5 })));
        act.push((Timestamp(t), sample));
        t += 10 * (1 + rng.below(6) as i64);
    }
    let (lo, hi) = (act[0].0 .0, act[m - 1].0 .0);
    let n = 1 + rng.below(20) as usize;
    let mut times: Vec<i64> = (0..n)
        .map(|_| lo - 100 + 10 * rng.below(((hi - lo + 200) / 10 + 1) as u64) as i64)
        .collect();
    // At least one reading inside the activity span.
    times.push(lo + 10 * rng.below(((hi - lo) / 10 + 1) as u64) as i64);
    times.sort_unstable();
    times.dedup();
    let cgm = CgmSeries::new(
        "X",
        times.iter().map(|&t| (Timestamp(t), rng.uniform(40.0, 400.0))).collect(),
    )
    .unwrap();
    SyncInstance {
        cgm,
        activity: ActivitySeries::new("X", 30, act).unwrap(),
        window,
    }
}

/// Brute-force fusion: trim to the activity span, sort every activity sample
/// by (distance, timestamp), take the first `w`, and average them in
/// timestamp order.
pub fn brute_force_fuse(inst: &SyncInstance) -> Vec<(i64, f64, [f64; 8])> {
    let act = &inst.activity.samples;
    let (lo, hi) = (act[0].0 .0, act[act.len() - 1].0 .0);
    inst.cgm
        .samples
        .iter()
        .filter(|(t, _)| t.0 >= lo && t.0 <= hi)
        .map(|&(t, g)| {
            let mut idx: Vec<usize> = (0..act.len()).collect();
            idx.sort_by_key(|&i| ((act[i].0 .0 - t.0).abs(), act[i].0 .0));
            let mut chosen = idx[..inst.window].to_vec();
            chosen.sort_unstable();
            let mut avg = [0.0; 8];
            for &i in &chosen {
                for (a, v) in avg.iter_mut().zip(act[i].1.to_array()) {
                    *a += v;
                }
            }
            for a in &mut avg {
                *a /= inst.window as f64;
            }
            (t.0, g, avg)
        })
        .collect()
}

/// Largest relative deviation between `fuse_patient` and the oracle, or
/// `None` when the sample lists differ in length or timestamps.
pub fn sync_deviation(inst: &SyncInstance) -> Option<f64> {
    let cfg = SyncConfig::with_window(inst.window).unwrap();
    let fused = cgm_wide_deep::sync::fuse_patient(&inst.cgm, &inst.activity, &cfg).unwrap();
    let oracle = brute_force_fuse(inst);
    if fused.samples.len() != oracle.len() {
        return None;
    }
    let mut worst: f64 = 0.0;
    for (s, (t, g, avg)) in fused.samples.iter().zip(&oracle) {
        if s.timestamp.0 != *t || s.glucose != *g {
            return None;
        }
        for (a, b) in s.avg_activity.iter().zip(avg) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-300));
        }
    }
    Some(worst)
}

/// True when some retained CGM reading has two activity samples equidistant
/// across the window boundary, so the tie rule decides membership.
pub fn has_boundary_tie(inst: &SyncInstance) -> bool {
    let act = &inst.activity.samples;
    let (lo, hi) = (act[0].0 .0, act[act.len() - 1].0 .0);
    if inst.window >= act.len() {
        return false;
    }
    inst.cgm
        .samples
        .iter()
        .filter(|(t, _)| t.0 >= lo && t.0 <= hi)
        .any(|(t, _)| {
            let mut d: Vec<i64> = act.iter().map(|a| (a.0 .0 - t.0).abs()).collect();
            d.sort_unstable();
            d[inst.window - 1] == d[inst.window]
        })
}

pub const GRAD_EPS: f64 = 1e-4;
pub const GRAD_MAX_REL_ERR: f64 = 1e-4;

/// Relative error with a floor on the denominator so that gradients which are
/// zero up to rounding are compared absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter of a randomly perturbed model.
pub fn gradcheck_worst(seed: u64, n: usize, hidden: usize, width: usize, wide: bool, wide_sigmoid: bool) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let mut p = ModelParams::init(
        ModelShape {
            deep: Some((width, n)),
            hidden_dim: hidden,
            wide,
        },
        &mut rng,
    );
    p.wide_sigmoid = wide_sigmoid;
    for s in p.weights.slices_mut() {
        for v in s.iter_mut() {
            *v += rng.uniform(-0.5, 0.5);
        }
    }
    let seq = Sequence::new(n, width, (0..n * width).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
    let feats: [f64; 8] = std::array::from_fn(|_| rng.normal(0.0, 1.0));
    let feats = wide.then_some(feats);

    let (_, tape) = model_forward_tape(&p, Some(&seq), feats.as_ref()).unwrap();
    let analytic = model_backward(&p, &tape, 1.0).unwrap().to_flat();

    let base = p.weights.to_flat();
    let mut probe = p.clone();
    let mut worst: f64 = 0.0;
    for (k, &g) in analytic.iter().enumerate() {
        let mut flat = base.clone();
        flat[k] = base[k] + GRAD_EPS;
        probe.weights.set_flat(&flat).unwrap();
        let up = model_forward(&probe, Some(&seq), feats.as_ref()).unwrap();
        flat[k] = base[k] - GRAD_EPS;
        probe.weights.set_flat(&flat).unwrap();
        let down = model_forward(&probe, Some(&seq), feats.as_ref()).unwrap();
        let numeric = (up - down) / (2.0 * GRAD_EPS);
        worst = worst.max(rel_err(g, numeric));
    }
    worst
}
