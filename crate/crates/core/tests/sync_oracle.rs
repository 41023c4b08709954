mod common;

use cgm_wide_deep::rng::SplitMix64;
use cgm_wide_deep::sync::{nearest_activity_window, truncate_cohort, TruncateMode};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn fuse_matches_brute_force(seed in any::<u64>()) {
        let inst = common::random_sync_instance(&mut SplitMix64::new(seed));
        let dev = common::sync_deviation(&inst);
        prop_assert!(dev.is_some_and(|d| d <= 1e-12), "deviation {dev:?}");
    }

    #[test]
    fn window_is_contiguous_and_minimal(seed in any::<u64>(), probe in -200i64..3000) {
        let inst = common::random_sync_instance(&mut SplitMix64::new(seed));
        let act = &inst.activity;
        let t = cgm_wide_deep::ingest::Timestamp(act.samples[0].0 .0 + probe * 10);
        let r = nearest_activity_window(act, t, inst.window).unwrap();
        prop_assert_eq!(r.len(), inst.window);
        let dist = |i: usize| (act.samples[i].0 .0 - t.0).abs();
        let worst_in = r.clone().map(dist).max().unwrap();
        for i in (0..act.samples.len()).filter(|i| !r.contains(i)) {
            prop_assert!(dist(i) >= worst_in);
        }
    }

    #[test]
    fn truncation_yields_common_length(lens in prop::collection::vec(1usize..40, 1..8), cap in prop::option::of(1usize..50)) {
        let mut rng = SplitMix64::new(lens.len() as u64);
        let mut seqs: Vec<_> = lens
            .iter()
            .map(|&n| {
                let inst = common::random_sync_instance(&mut rng);
                let mut f = cgm_wide_deep::sync::fuse_patient(
                    &inst.cgm,
                    &inst.activity,
                    &cgm_wide_deep::sync::SyncConfig::with_window(inst.window).unwrap(),
                )
                .unwrap();
                let first = f.samples[0];
                f.samples = (0..n).map(|_| first).collect();
                f
            })
            .collect();
        let want = lens.iter().copied().min().unwrap().min(cap.unwrap_or(usize::MAX));
        let got = truncate_cohort(&mut seqs, TruncateMode::EarliestPrefix, cap).unwrap();
        prop_assert_eq!(got, want);
        prop_assert!(seqs.iter().all(|s| s.len() == want));
    }
}
