use cgm_wide_deep::net::{checkpoint_to_bytes, Sequence};
use cgm_wide_deep::rng::SplitMix64;
use cgm_wide_deep::train::{cross_validate, train_fold, Example, Experiment, TrainConfig};

fn examples(n: usize, len: usize, seed: u64) -> Vec<Example> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|i| {
            let data: Vec<f64> = (0..len * 9).map(|_| rng.normal(120.0, 30.0)).collect();
            let mean = data.iter().step_by(9).sum::<f64>() / len as f64;
            Example {
                patient_id: format!("P{i:03}"),
                sequence: Some(Sequence::new(len, 9, data).unwrap()),
                tabular: Some(std::array::from_fn(|_| rng.normal(50.0, 10.0))),
                target: (mean - 120.0) / 30.0 + rng.normal(0.0, 0.1),
            }
        })
        .collect()
}

fn small_cfg(epochs: usize, folds: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        folds,
        seed: 17,
        hidden_dim: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn memorizes_one_example() {
    let ex = examples(1, 5, 1);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        experiment: Experiment::DeepCgmActivity,
        ..small_cfg(400, 2)
    };
    let single = Example {
        tabular: None,
        target: 1.5,
        ..ex[0].clone()
    };
    let model = train_fold(&[&single], &cfg, 3).unwrap();
    let losses = &model.epoch_losses;
    assert_eq!(losses.len(), 400);
    assert!(losses[losses.len() - 1] < 1e-3, "final loss {}", losses[losses.len() - 1]);
    assert!(losses[losses.len() - 1] < losses[0] / 100.0);
    let early: f64 = losses[..50].iter().sum();
    let late: f64 = losses[350..].iter().sum();
    assert!(late < early);
}

#[test]
fn one_prediction_per_patient() {
    let ex = examples(23, 6, 2);
    let cv = cross_validate(&ex, &small_cfg(2, 5)).unwrap();
    assert_eq!(cv.predictions.len(), 23);
    for (p, e) in cv.predictions.iter().zip(&ex) {
        assert_eq!(p.patient_id, e.patient_id);
        assert_eq!(p.true_delta, e.target);
        assert!(p.pred_delta.is_finite());
    }
    for f in &cv.folds {
        assert!(f.test_ids.iter().all(|id| !f.train_ids.contains(id)));
        assert_eq!(f.test_ids.len() + f.train_ids.len(), 23);
    }
}

#[test]
fn leave_one_out() {
    let ex = examples(6, 4, 3);
    let cv = cross_validate(&ex, &small_cfg(2, 6)).unwrap();
    assert_eq!(cv.folds.len(), 6);
    assert!(cv.folds.iter().all(|f| f.test_ids.len() == 1));
}

#[test]
fn bitwise_deterministic() {
    let ex = examples(10, 6, 4);
    let cfg = small_cfg(3, 5);
    let a = cross_validate(&ex, &cfg).unwrap();
    let b = cross_validate(&ex, &cfg).unwrap();
    for (fa, fb) in a.folds.iter().zip(&b.folds) {
        assert_eq!(checkpoint_to_bytes(&fa.model.params), checkpoint_to_bytes(&fb.model.params));
    }
    let bits = |v: &[cgm_wide_deep::train::OofPrediction]| v.iter().map(|p| p.pred_delta.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.predictions), bits(&b.predictions));
}

#[test]
fn held_out_data_does_not_leak() {
    let ex = examples(12, 5, 5);
    let cfg = small_cfg(3, 4);
    let base = cross_validate(&ex, &cfg).unwrap();
    let fold = &base.folds[1];
    let victim = ex.iter().position(|e| e.patient_id == fold.test_ids[0]).unwrap();
    let mut changed = ex.clone();
    let e = &mut changed[victim];
    e.target += 10.0;
    e.sequence.as_mut().unwrap().data.iter_mut().for_each(|v| *v *= 3.0);
    e.tabular.as_mut().unwrap()[0] = -1e3;
    let after = cross_validate(&changed, &cfg).unwrap();
    assert_eq!(
        checkpoint_to_bytes(&fold.model.params),
        checkpoint_to_bytes(&after.folds[1].model.params)
    );
    // Folds that trained on the victim do change.
    assert_ne!(
        checkpoint_to_bytes(&base.folds[0].model.params),
        checkpoint_to_bytes(&after.folds[0].model.params)
    );
}

#[test]
fn wide_only_has_no_sequence_branch() {
    let ex: Vec<Example> = examples(8, 4, 6)
        .into_iter()
        .map(|e| Example { sequence: None, ..e })
        .collect();
    let cfg = TrainConfig {
        experiment: Experiment::WideOnly,
        ..small_cfg(2, 4)
    };
    let cv = cross_validate(&ex, &cfg).unwrap();
    assert!(cv.folds.iter().all(|f| f.model.params.weights.deep.is_none()));
}
