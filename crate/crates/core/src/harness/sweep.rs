//! Training-window sweep: how validation and test accuracy evolve with the
//! amount of past data a model is trained on.

use std::cell::Cell;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{slice_window, Day, EventLog, TemporalSplit};
use crate::metrics::{DailyMetrics, EvalSet};
use crate::training::EpochTrace;

use super::config::{derive_seed, ExperimentConfig, ModelKind};
use super::models::{train_model, Schedule, TrainedModel};

/// The event log with its test period held back behind a counted accessor.
#[derive(Debug)]
pub struct GuardedLog {
    visible: EventLog,
    full: EventLog,
    test: (Day, Day),
    test_reads: Cell<usize>,
}

impl GuardedLog {
    pub fn new(log: &EventLog, split: &TemporalSplit) -> Self {
        let visible = if split.test.0 == 0 {
            log.restrict_days(1, 0)
        } else {
            log.restrict_days(0, split.test.0 - 1)
        };
        GuardedLog {
            visible,
            full: log.clone(),
            test: split.test,
            test_reads: Cell::new(0),
        }
    }

    /// Every event strictly before the test period.
    pub fn visible(&self) -> &EventLog {
        &self.visible
    }

    /// Test-period events. Each call is counted.
    pub fn test_period(&self) -> EventLog {
        self.test_reads.set(self.test_reads.get() + 1);
        self.full.restrict_days(self.test.0, self.test.1)
    }

    pub fn test_reads(&self) -> usize {
        self.test_reads.get()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: ModelKind,
    pub window_days: u32,
    /// The window reaches back before the first logged day.
    pub truncated: bool,
    /// No training events in the window; scores are NaN.
    pub empty: bool,
    pub train_events: usize,
    pub valid_map_u: f64,
    pub valid_map_i: f64,
    pub valid_map_sym: f64,
    pub test_map_u: f64,
    pub test_map_i: f64,
    pub test_map_sym: f64,
    pub test_user_queries: usize,
    pub test_item_queries: usize,
    /// Epochs selected on validation and reused for the test refit.
    pub epochs: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub row: SweepRow,
    pub trace: Vec<EpochTrace>,
    pub test_daily: Vec<DailyMetrics>,
    /// The refit model scored on the test period.
    pub model: Option<TrainedModel>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// Number of times the test slice was read.
    pub test_reads: usize,
}

impl SweepResult {
    pub fn rows(&self) -> Vec<SweepRow> {
        self.cells.iter().map(|c| c.row.clone()).collect()
    }

    pub fn rows_for(&self, kind: ModelKind) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(move |c| c.row.model == kind)
    }

    /// Row with the highest validation mapSym for `kind`; ties keep the smaller window.
    pub fn best(&self, kind: ModelKind) -> Option<&SweepCell> {
        self.rows_for(kind)
            .filter(|c| !c.row.empty)
            .fold(None, |best: Option<&SweepCell>, c| match best {
                Some(b) if b.row.valid_map_sym >= c.row.valid_map_sym => Some(b),
                _ => Some(c),
            })
    }

    /// Row with the largest window for `kind`.
    pub fn largest(&self, kind: ModelKind) -> Option<&SweepCell> {
        self.rows_for(kind)
            .filter(|c| !c.row.empty)
            .max_by_key(|c| c.row.window_days)
    }
}

/// For every model and window size: fit on the window ending at the last
/// training day with early stopping on the validation period, then refit on
/// the same-size window ending the day before the test period for the
/// selected number of epochs and score it on the test period.
pub fn run_window_sweep(cfg: &ExperimentConfig, log: &EventLog) -> Result<SweepResult> {
    cfg.validate()?;
    let split = cfg.split.to_split()?;
    let guard = GuardedLog::new(log, &split);
    let valid_period = guard.visible().restrict_days(split.valid.0, split.valid.1);
    if valid_period.is_empty() {
        return Err(Error::EmptyLog("validation period".into()));
    }
    let mut cells = Vec::new();
    for (k, &kind) in cfg.models.iter().enumerate() {
        for &w in &cfg.window_sizes_days {
            cells.push(sweep_cell(cfg, kind, k, w, &guard, &valid_period, &split)?);
        }
    }
    Ok(SweepResult {
        cells,
        test_reads: guard.test_reads(),
    })
}

fn sweep_cell(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    k: usize,
    w: u32,
    guard: &GuardedLog,
    valid_period: &EventLog,
    split: &TemporalSplit,
) -> Result<SweepCell> {
    let started = Instant::now();
    let capacity = cfg.history_capacity(kind);
    let slice = slice_window(guard.visible(), split.train.1, w);
    let mut row = SweepRow {
        model: kind,
        window_days: w,
        truncated: slice.truncated,
        empty: slice.is_empty(),
        train_events: slice.log.len(),
        valid_map_u: f64::NAN,
        valid_map_i: f64::NAN,
        valid_map_sym: f64::NAN,
        test_map_u: f64::NAN,
        test_map_i: f64::NAN,
        test_map_sym: f64::NAN,
        test_user_queries: 0,
        test_item_queries: 0,
        epochs: 0,
        seconds: 0.0,
    };
    if row.empty {
        return Ok(SweepCell {
            row,
            trace: Vec::new(),
            test_daily: Vec::new(),
            model: None,
        });
    }
    let valid_set = EvalSet::new(&slice.log, valid_period, capacity)?;
    let fitted = train_model(
        cfg,
        kind,
        &slice.log,
        Schedule::EarlyStop(&valid_set),
        derive_seed(cfg.seed, &[k as u64, u64::from(w), 0]),
        None,
    )?;
    let valid = fitted.valid.unwrap_or_else(|| valid_set.evaluate(&fitted.model));
    row.valid_map_u = valid.map_user;
    row.valid_map_i = valid.map_item;
    row.valid_map_sym = valid.map_sym;
    row.epochs = fitted.best_epoch;

    let retrain = slice_window(guard.visible(), split.test.0 - 1, w);
    let refit = train_model(
        cfg,
        kind,
        &retrain.log,
        Schedule::Fixed(fitted.best_epoch),
        derive_seed(cfg.seed, &[k as u64, u64::from(w), 1]),
        None,
    )?;
    let test_set = EvalSet::new(&retrain.log, &guard.test_period(), capacity)?;
    let test = test_set.evaluate(&refit.model);
    row.test_map_u = test.map_user;
    row.test_map_i = test.map_item;
    row.test_map_sym = test.map_sym;
    row.test_user_queries = test.user_queries;
    row.test_item_queries = test.item_queries;
    if cfg.timings {
        row.seconds = started.elapsed().as_secs_f64();
    }
    Ok(SweepCell {
        row,
        trace: fitted.trace,
        test_daily: test.daily,
        model: Some(refit.model),
    })
}
