mod support;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hcf_core::events::{slice_window, Day, EventLog};
use hcf_core::harness::config::ModelKind;
use hcf_core::harness::run_window_sweep;
use hcf_core::harness::slide::slide_model;
use hcf_core::harness::sweep::GuardedLog;
use hcf_core::hcf::{HcfConfig, HcfModel};
use hcf_core::history::HistoryIndex;
use hcf_core::metrics::{EvalSet, Scorer};

fn named(log: &EventLog) -> Vec<(Day, String, String)> {
    log.events()
        .iter()
        .map(|e| {
            (
                e.day,
                log.users().name(e.user).unwrap().to_owned(),
                log.items().name(e.item).unwrap().to_owned(),
            )
        })
        .collect()
}

fn triples_strategy() -> impl Strategy<Value = Vec<(Day, u32, u32)>> {
    prop::collection::vec((0u32..50, 0u32..12, 0u32..15), 1..200)
}

proptest! {
    #[test]
    fn window_slice_keeps_exactly_the_window(triples in triples_strategy(), end in 0u32..60, size in 1u32..40) {
        let log = EventLog::from_triples(12, 15, &triples);
        let slice = slice_window(&log, end, size);
        let lo = (i64::from(end) - i64::from(size) + 1).max(0) as Day;
        let expect: Vec<_> = named(&log).into_iter().filter(|e| e.0 >= lo && e.0 <= end).collect();
        prop_assert_eq!(named(&slice.log), expect);
        // vocabularies hold exactly the entities present
        let mut users: Vec<String> = named(&slice.log).into_iter().map(|e| e.1).collect();
        users.sort();
        users.dedup();
        let mut vocab = slice.log.users().names().to_vec();
        vocab.sort();
        prop_assert_eq!(users, vocab);
    }

    #[test]
    fn nested_restrictions_compose(triples in triples_strategy(), a in 0u32..50, b in 0u32..50, c in 0u32..50, d in 0u32..50) {
        let log = EventLog::from_triples(12, 15, &triples);
        let (a, b) = (a.min(b), a.max(b));
        let (c, d) = (c.min(d), c.max(d));
        let twice = log.restrict_days(a, b).restrict_days(c, d);
        let once = log.restrict_days(a.max(c), b.min(d));
        prop_assert_eq!(named(&twice), named(&once));
    }

    #[test]
    fn future_events_never_reach_history_or_scores(triples in triples_strategy(), t in 1u32..50, seed in 0u64..1000) {
        let log = EventLog::from_triples(12, 15, &triples);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let past: Vec<_> = triples.iter().copied().filter(|e| e.0 < t).collect();
        let mut rewritten = past.clone();
        for _ in 0..rng.random_range(0..40) {
            rewritten.push((rng.random_range(t..60), rng.random_range(0..12), rng.random_range(0..15)));
        }
        let a = HistoryIndex::build(&log, 4);
        let b = HistoryIndex::build(&EventLog::from_triples(12, 15, &rewritten), 4);
        let c = HistoryIndex::build(&EventLog::from_triples(12, 15, &past), 4);
        for u in 0..12 {
            prop_assert_eq!(a.user_history(u, t).unwrap(), b.user_history(u, t).unwrap());
            prop_assert_eq!(a.user_history(u, t).unwrap(), c.user_history(u, t).unwrap());
        }
        for i in 0..15 {
            prop_assert_eq!(a.item_history(i, t).unwrap(), b.item_history(i, t).unwrap());
            prop_assert_eq!(a.item_history(i, t).unwrap(), c.item_history(i, t).unwrap());
        }
        let model = HcfModel::new(12, 15, HcfConfig { d: 6, n: 4, init_std: 0.5, ..HcfConfig::default() }, seed);
        let users: Vec<u32> = (0..12).collect();
        let items: Vec<u32> = (0..15).collect();
        let sa = model.score_matrix(&a, t, &users, &items);
        let sb = model.score_matrix(&b, t, &users, &items);
        prop_assert!(sa.iter().zip(&sb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn eval_set_rejects_overlapping_period() {
    let log = EventLog::from_triples(2, 2, &[(0, 0, 0), (1, 1, 1), (2, 0, 1)]);
    let train = log.restrict_days(0, 1);
    let period = log.restrict_days(1, 2);
    assert!(EvalSet::new(&train, &period, 3).is_err());
    assert!(EvalSet::new(&train, &log.restrict_days(2, 2), 3).is_ok());
}

#[test]
fn guarded_log_counts_test_reads() {
    let log = EventLog::from_triples(2, 2, &[(0, 0, 0), (5, 1, 1), (9, 0, 1)]);
    let split = hcf_core::events::TemporalSplit::new((0, 3), (4, 6), (7, 9)).unwrap();
    let guard = GuardedLog::new(&log, &split);
    assert_eq!(guard.visible().day_range(), Some((0, 5)));
    assert_eq!(guard.test_reads(), 0);
    assert_eq!(guard.test_period().len(), 1);
    assert_eq!(guard.test_reads(), 1);
}

#[test]
fn sweep_reads_the_test_slice_once_per_row() {
    let mut cfg = support::small_config();
    cfg.models = vec![ModelKind::Historical, ModelKind::MfBpr];
    cfg.window_sizes_days = vec![7, 14, 30];
    let log = cfg.load_data().unwrap();
    let sweep = run_window_sweep(&cfg, &log).unwrap();
    assert_eq!(sweep.cells.len(), 6);
    assert_eq!(sweep.test_reads, 6);
}

#[test]
fn sliding_windows_stop_before_the_predicted_day() {
    let cfg = support::small_config();
    let log = cfg.load_data().unwrap();
    for w in [7, 20, 200] {
        let (row, days) = slide_model(&cfg, &log, ModelKind::Historical, 0, w, 0).unwrap();
        assert_eq!(days.len(), 10);
        for d in &days {
            assert!(d.train_days.1 < d.day, "{d:?}");
            assert!(d.train_days.0 + w >= d.day, "{d:?}");
        }
        assert!(row.user_queries > 0 && row.item_queries > 0);
    }
}

#[test]
fn saturated_sliding_window_matches_static() {
    // A one-day test period: the sliding window for that day and the
    // static refit window are the same set of days.
    let mut cfg = support::small_config();
    cfg.models = vec![ModelKind::Historical];
    cfg.split.test = (80, 80);
    cfg.window_sizes_days = vec![365];
    let log = cfg.load_data().unwrap().restrict_days(0, 80);
    let sweep = run_window_sweep(&cfg, &log).unwrap();
    let (row, _) = slide_model(&cfg, &log, ModelKind::Historical, 0, 365, 0).unwrap();
    let fixed = &sweep.largest(ModelKind::Historical).unwrap().row;
    assert_eq!(row.map_u, fixed.test_map_u);
    assert_eq!(row.map_i, fixed.test_map_i);
    assert_eq!(row.map_sym, fixed.test_map_sym);
    assert_eq!(row.user_queries, fixed.test_user_queries);
}
