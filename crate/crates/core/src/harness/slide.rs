//! Sliding-window retraining over the test period: the model that predicts
//! day `t` is trained on the `w` days before `t` only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{slice_window, Day, EventLog};
use crate::metrics::{query_aps, symmetrized, EvalSet};

use super::config::{derive_seed, ExperimentConfig, ModelKind};
use super::models::{train_model, Schedule, TrainedModel};
use super::sweep::SweepResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlideMode {
    /// Retrained every test day.
    Sliding,
    /// The sweep's refit at the best validation window.
    StaticBest,
    /// The sweep's refit at the largest window.
    StaticFull,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideRow {
    pub model: ModelKind,
    pub mode: SlideMode,
    pub window_days: u32,
    pub epochs: usize,
    pub map_u: f64,
    pub map_i: f64,
    pub map_sym: f64,
    pub user_queries: usize,
    pub item_queries: usize,
}

/// One retrain of the sliding study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideDay {
    pub model: ModelKind,
    pub day: Day,
    /// First and last training day actually present in the window.
    pub train_days: (Day, Day),
    pub map_u: f64,
    pub map_i: f64,
    pub map_sym: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideResult {
    pub rows: Vec<SlideRow>,
    pub days: Vec<SlideDay>,
}

impl SlideResult {
    pub fn row(&self, kind: ModelKind, mode: SlideMode) -> Option<&SlideRow> {
        self.rows.iter().find(|r| r.model == kind && r.mode == mode)
    }
}

/// Window and epoch count of the sliding retrain for `kind`: the configured
/// window, or the best validation window of the sweep, with the epochs
/// selected on validation for that window.
pub fn slide_settings(cfg: &ExperimentConfig, sweep: &SweepResult, kind: ModelKind) -> Result<(u32, usize)> {
    let missing = || Error::Config(format!("sweep has no usable row for {}", kind.tag()));
    if cfg.sliding_window_days > 0 {
        let w = cfg.sliding_window_days;
        let epochs = sweep
            .rows_for(kind)
            .filter(|c| !c.row.empty)
            .min_by_key(|c| c.row.window_days.abs_diff(w))
            .ok_or_else(missing)?
            .row
            .epochs;
        Ok((w, epochs))
    } else {
        let best = sweep.best(kind).ok_or_else(missing)?;
        Ok((best.row.window_days, best.row.epochs))
    }
}

/// Runs the sliding retrain for every configured model and lists it beside
/// the static results of `sweep`.
pub fn run_sliding_study(cfg: &ExperimentConfig, log: &EventLog, sweep: &SweepResult) -> Result<SlideResult> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut days = Vec::new();
    for (k, &kind) in cfg.models.iter().enumerate() {
        let (w, epochs) = slide_settings(cfg, sweep, kind)?;
        let (row, per_day) = slide_model(cfg, log, kind, k, w, epochs)?;
        rows.push(row);
        days.extend(per_day);
        for (mode, cell) in [
            (SlideMode::StaticBest, sweep.best(kind)),
            (SlideMode::StaticFull, sweep.largest(kind)),
        ] {
            if let Some(cell) = cell {
                rows.push(SlideRow {
                    model: kind,
                    mode,
                    window_days: cell.row.window_days,
                    epochs: cell.row.epochs,
                    map_u: cell.row.test_map_u,
                    map_i: cell.row.test_map_i,
                    map_sym: cell.row.test_map_sym,
                    user_queries: cell.row.test_user_queries,
                    item_queries: cell.row.test_item_queries,
                });
            }
        }
    }
    Ok(SlideResult { rows, days })
}

/// Sliding retrain of one model with window `w` and a fixed epoch count.
/// User and item APs are pooled over the whole test period before averaging.
pub fn slide_model(
    cfg: &ExperimentConfig,
    log: &EventLog,
    kind: ModelKind,
    k: usize,
    w: u32,
    epochs: usize,
) -> Result<(SlideRow, Vec<SlideDay>)> {
    let (first, last) = cfg.split.test;
    let capacity = cfg.history_capacity(kind);
    let mut user_aps = Vec::new();
    let mut item_aps = Vec::new();
    let mut per_day = Vec::new();
    let mut previous: Option<(TrainedModel, EventLog)> = None;
    for day in first..=last {
        let target = log.restrict_days(day, day);
        if target.is_empty() {
            continue;
        }
        let window = slice_window(log, day - 1, w).log;
        let Some((lo, hi)) = window.day_range() else {
            continue;
        };
        assert!(
            hi < day && lo + w >= day,
            "training window [{lo}, {hi}] leaks into day {day}"
        );
        let warm = match (&previous, cfg.slide_warm_start) {
            (Some((m, l)), true) => Some((m, l.users(), l.items())),
            _ => None,
        };
        let trained = train_model(
            cfg,
            kind,
            &window,
            Schedule::Fixed(epochs),
            derive_seed(cfg.seed, &[k as u64, u64::from(day), 2]),
            warm,
        )?;
        let set = EvalSet::new(&window, &target, capacity)?;
        let u = query_aps(&trained.model, set.index(), set.user_queries());
        let i = query_aps(&trained.model, set.index(), set.item_queries());
        let (mu, mi) = (mean(&u), mean(&i));
        per_day.push(SlideDay {
            model: kind,
            day,
            train_days: (lo, hi),
            map_u: mu,
            map_i: mi,
            map_sym: symmetrized(mu, mi),
        });
        user_aps.extend(u);
        item_aps.extend(i);
        if cfg.slide_warm_start {
            previous = Some((trained.model, window));
        }
    }
    let (map_u, map_i) = (mean(&user_aps), mean(&item_aps));
    let row = SlideRow {
        model: kind,
        mode: SlideMode::Sliding,
        window_days: w,
        epochs,
        map_u,
        map_i,
        map_sym: symmetrized(map_u, map_i),
        user_queries: user_aps.len(),
        item_queries: item_aps.len(),
    };
    Ok((row, per_day))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
