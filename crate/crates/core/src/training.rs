//! Pairwise ranking training: positive enumeration, symmetric negative
//! sampling, the BPR objective, the optimizer loop with early stopping, and a
//! finite-difference gradient checker.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Day, EventLog, Perimeter};
use crate::history::HistoryIndex;
use crate::metrics::{EvalSet, MetricsReport, Scorer};
use crate::params::{GradBuffer, Optimizer, OptimizerKind, Parameterized};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    User,
    Item,
}

/// A positive `(day, user, item)` with a sampled negative.
///
/// User side: `negative` is an item and the pair compares `(user, item)`
/// against `(user, negative)`. Item side: `negative` is a user and the pair
/// compares `(user, item)` against `(negative, item)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletEntry {
    pub day: Day,
    pub user: u32,
    pub item: u32,
    pub negative: u32,
    pub side: Side,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `-ln sigmoid(pos - neg)`.
pub fn bpr_loss(pos_score: f64, neg_score: f64) -> f64 {
    softplus(neg_score - pos_score)
}

/// A model trainable with sampled pairwise losses.
pub trait PairwiseModel: Parameterized + Scorer + Clone {
    /// Loss of one entry.
    fn entry_loss(&self, index: &HistoryIndex, entry: &TripletEntry) -> f64;
    /// Adds `scale * d(loss)/d(params)` into `grad`; returns the loss.
    fn backward(&self, index: &HistoryIndex, entry: &TripletEntry, scale: f64, grad: &mut GradBuffer) -> f64;
    /// Signs of every ReLU pre-activation the entry's loss goes through.
    /// Piecewise-linear models use it to locate kinks; smooth models return nothing.
    fn relu_signs(&self, _index: &HistoryIndex, _entry: &TripletEntry) -> Vec<bool> {
        Vec::new()
    }
}

impl PairwiseModel for crate::hcf::HcfModel {
    fn entry_loss(&self, index: &HistoryIndex, entry: &TripletEntry) -> f64 {
        crate::hcf::HcfModel::entry_loss(self, index, entry)
    }

    fn backward(&self, index: &HistoryIndex, entry: &TripletEntry, scale: f64, grad: &mut GradBuffer) -> f64 {
        crate::hcf::HcfModel::backward(self, index, entry, scale, grad)
    }

    fn relu_signs(&self, index: &HistoryIndex, entry: &TripletEntry) -> Vec<bool> {
        crate::hcf::HcfModel::relu_signs(self, index, entry)
    }
}

/// One `(day, user, item)` per event, duplicates included, in a seeded shuffle.
pub fn enumerate_positives<R: Rng>(log: &EventLog, rng: &mut R) -> Vec<(Day, u32, u32)> {
    let mut out: Vec<_> = log.events().iter().map(|e| (e.day, e.user, e.item)).collect();
    out.shuffle(rng);
    out
}

/// Draws negatives for positive triplets.
///
/// A user-side negative is a perimeter item outside the user's history at the
/// positive's day; an item-side negative is a perimeter user outside the
/// item's history. Today's positives are not excluded unless
/// `exclude_same_day` is set.
pub struct NegativeSampler<'a> {
    index: &'a HistoryIndex,
    users: &'a [u32],
    items: &'a [u32],
    exclude_same_day: bool,
    skipped: usize,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(index: &'a HistoryIndex, perimeter: &'a Perimeter, exclude_same_day: bool) -> Self {
        NegativeSampler {
            index,
            users: &perimeter.users,
            items: &perimeter.items,
            exclude_same_day,
            skipped: 0,
        }
    }

    /// Entries dropped because the exclusion set covered the whole pool.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Ids a negative for `(day, anchor)` on `side` must avoid.
    pub fn exclusion_set(&self, side: Side, day: Day, anchor: u32) -> Vec<u32> {
        let (window, events) = match side {
            Side::User => (self.index.user_window(anchor, day), self.index.user_events(anchor)),
            Side::Item => (self.index.item_window(anchor, day), self.index.item_events(anchor)),
        };
        let mut out: Vec<u32> = window.iter().map(|e| e.1).collect();
        if self.exclude_same_day {
            let lo = events.partition_point(|e| e.0 < day);
            let hi = events.partition_point(|e| e.0 <= day);
            out.extend(events[lo..hi].iter().map(|e| e.1));
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn sample<R: Rng>(&mut self, positive: (Day, u32, u32), rng: &mut R) -> Option<TripletEntry> {
        let (day, user, item) = positive;
        let side = if rng.random_bool(0.5) { Side::User } else { Side::Item };
        let (anchor, pool) = match side {
            Side::User => (user, self.items),
            Side::Item => (item, self.users),
        };
        let excluded = self.exclusion_set(side, day, anchor);
        let negative = draw_outside(pool, &excluded, rng);
        match negative {
            Some(negative) => Some(TripletEntry {
                day,
                user,
                item,
                negative,
                side,
            }),
            None => {
                self.skipped += 1;
                None
            }
        }
    }
}

/// Uniform draw from `pool \ excluded` (`excluded` sorted). Rejection
/// sampling unless the pool is small relative to the exclusion set.
fn draw_outside<R: Rng>(pool: &[u32], excluded: &[u32], rng: &mut R) -> Option<u32> {
    if pool.is_empty() {
        return None;
    }
    if pool.len() > 2 * excluded.len() {
        loop {
            let candidate = pool[rng.random_range(0..pool.len())];
            if excluded.binary_search(&candidate).is_err() {
                return Some(candidate);
            }
        }
    }
    let allowed: Vec<u32> = pool
        .iter()
        .copied()
        .filter(|c| excluded.binary_search(c).is_err())
        .collect();
    if allowed.is_empty() {
        None
    } else {
        Some(allowed[rng.random_range(0..allowed.len())])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub exclude_same_day_positives: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            batch_size: 256,
            negatives_per_positive: 1,
            patience: 5,
            max_epochs: 200,
            exclude_same_day_positives: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.negatives_per_positive == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch size, negatives per positive and max epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_map_u: Option<f64>,
    pub valid_map_i: Option<f64>,
    pub valid_map_sym: Option<f64>,
    pub seconds: f64,
}

/// Tracks the best validation score and the model that achieved it.
#[derive(Clone, Debug)]
pub struct EarlyStopping<M> {
    patience: usize,
    best_score: f64,
    best_epoch: usize,
    best_snapshot: Option<M>,
}

impl<M: Clone> EarlyStopping<M> {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_score: f64::NEG_INFINITY,
            best_epoch: 0,
            best_snapshot: None,
        }
    }

    /// Records the score of `epoch` (1-based); returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, score: f64, model: &M) -> bool {
        if score > self.best_score || self.best_snapshot.is_none() {
            self.best_score = score;
            self.best_epoch = epoch;
            self.best_snapshot = Some(model.clone());
        }
        epoch - self.best_epoch >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_score(&self) -> f64 {
        self.best_score
    }

    pub fn into_best(self) -> Option<M> {
        self.best_snapshot
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome<M> {
    pub model: M,
    pub trace: Vec<EpochTrace>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub best_valid: Option<MetricsReport>,
    pub skipped_negatives: usize,
}

/// Trains `model` on `train`.
///
/// With `validation`, every epoch is scored and training stops after
/// `patience` epochs without improvement of the symmetrized mAP, restoring
/// the best parameters. Without it, exactly `max_epochs` epochs run.
pub fn fit<M: PairwiseModel>(
    mut model: M,
    train: &EventLog,
    validation: Option<&EvalSet>,
    history_capacity: usize,
    cfg: &FitConfig,
    seed: u64,
    record_time: bool,
) -> Result<FitOutcome<M>> {
    cfg.validate()?;
    if let Some(v) = validation {
        if let (Some((_, train_last)), Some(first)) = (train.day_range(), v.first_day()) {
            if first <= train_last {
                return Err(Error::Config(format!(
                    "validation starts on day {first}, not after the last training day {train_last}"
                )));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = HistoryIndex::build(train, history_capacity);
    let perimeter = Perimeter {
        users: (0..train.num_users() as u32).collect(),
        items: (0..train.num_items() as u32).collect(),
    };
    let mut sampler = NegativeSampler::new(&index, &perimeter, cfg.exclude_same_day_positives);
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, &model.tensor_specs());
    let mut grad = model.zero_grad();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut trace = Vec::new();
    let mut best_valid = None;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let positives = enumerate_positives(train, &mut rng);
        let mut total_loss = 0.0;
        let mut count = 0usize;
        for chunk in positives.chunks(cfg.batch_size) {
            let mut entries = Vec::with_capacity(chunk.len() * cfg.negatives_per_positive);
            for &pos in chunk {
                for _ in 0..cfg.negatives_per_positive {
                    entries.extend(sampler.sample(pos, &mut rng));
                }
            }
            if entries.is_empty() {
                continue;
            }
            grad.clear();
            let scale = 1.0 / entries.len() as f64;
            for entry in &entries {
                total_loss += model.backward(&index, entry, scale, &mut grad);
            }
            count += entries.len();
            optimizer.apply(model.tensors_mut(), &grad);
        }
        let train_loss = if count > 0 { total_loss / count as f64 } else { 0.0 };
        if !train_loss.is_finite() || !model.all_finite() {
            return Err(Error::Divergence { epoch });
        }
        let report = validation.map(|v| v.evaluate(&model));
        let seconds = if record_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        trace.push(EpochTrace {
            epoch,
            train_loss,
            valid_map_u: report.as_ref().map(|r| r.map_user),
            valid_map_i: report.as_ref().map(|r| r.map_item),
            valid_map_sym: report.as_ref().map(|r| r.map_sym),
            seconds,
        });
        if let Some(report) = report {
            let improved = report.map_sym > stopper.best_score();
            let stop = stopper.observe(epoch, report.map_sym, &model);
            if improved {
                best_valid = Some(report);
            }
            if stop {
                break;
            }
        }
    }

    let (model, best_epoch) = if validation.is_some() {
        let best_epoch = stopper.best_epoch();
        (stopper.into_best().expect("at least one epoch"), best_epoch)
    } else {
        (model, trace.len())
    };
    Ok(FitOutcome {
        model,
        trace,
        best_epoch,
        best_valid,
        skipped_negatives: sampler.skipped(),
    })
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest [`relative_error`] over checked parameters.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose `±epsilon` stencil crosses a ReLU kink.
    pub skipped_kinks: usize,
}

/// Compares the analytic gradient of the batch-mean loss with central
/// differences on every parameter the batch touches. Differences are not
/// defined across a kink, so a parameter is skipped when moving it by
/// `±epsilon` flips the sign of any ReLU pre-activation.
pub fn grad_check<M: PairwiseModel>(
    model: &M,
    index: &HistoryIndex,
    batch: &[TripletEntry],
    epsilon: f64,
) -> GradCheck {
    assert!((1e-7..=1e-3).contains(&epsilon), "epsilon out of range");
    assert!(!batch.is_empty());
    let scale = 1.0 / batch.len() as f64;
    let mut grad = model.zero_grad();
    for entry in batch {
        model.backward(index, entry, scale, &mut grad);
    }
    let mean_loss = |m: &M| batch.iter().map(|e| m.entry_loss(index, e)).sum::<f64>() * scale;
    let signs = |m: &M| batch.iter().flat_map(|e| m.relu_signs(index, e)).collect::<Vec<bool>>();
    let base_signs = signs(model);
    let mut probe = model.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for (t, o) in grad.support() {
        let original = probe.tensors()[t][o];
        probe.tensors_mut()[t][o] = original + epsilon;
        let up = mean_loss(&probe);
        let up_signs = signs(&probe);
        probe.tensors_mut()[t][o] = original - epsilon;
        let down = mean_loss(&probe);
        let down_signs = signs(&probe);
        probe.tensors_mut()[t][o] = original;
        if up_signs != base_signs || down_signs != base_signs {
            out.skipped_kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * epsilon);
        out.max_rel_error = out.max_rel_error.max(relative_error(grad.tensor(t)[o], numeric));
        out.checked += 1;
    }
    out
}

/// `|a - n| / max(1e-6, |a| + |n|)`. The floor sits well above the
/// rounding noise of a central difference (about `1e-16 * loss / epsilon`),
/// so gradients that are exactly zero are compared in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}
