#![allow(dead_code)]

use hcf_core::events::{Day, EventLog};
use hcf_core::harness::ExperimentConfig;
use rand::Rng;

/// A uniform random log over `days` days.
pub fn uniform_log<R: Rng>(rng: &mut R, users: usize, items: usize, days: Day, events: usize) -> EventLog {
    let triples: Vec<(Day, u32, u32)> = (0..events)
        .map(|_| {
            (
                rng.random_range(0..days),
                rng.random_range(0..users as u32),
                rng.random_range(0..items as u32),
            )
        })
        .collect();
    EventLog::from_triples(users, items, &triples)
}

/// Small synthetic experiment: 90 days, test period on the last ten.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic.num_users = 50;
    cfg.data.synthetic.num_items = 80;
    cfg.data.synthetic.num_days = 90;
    cfg.data.synthetic.events_per_day = 40.0;
    cfg.split.train_end = 69;
    cfg.split.valid = (70, 79);
    cfg.split.test = (80, 89);
    cfg.window_sizes_days = vec![7, 30];
    cfg.hcf.d = 8;
    cfg.mf_bpr.d = 8;
    cfg.mf_implicit.d = 8;
    cfg.hcf_fit.max_epochs = 4;
    cfg.mf_bpr_fit.max_epochs = 4;
    cfg.mf_implicit_fit.max_epochs = 4;
    cfg
}
