//! Random hyperparameter search scored on the validation period.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{slice_window, EventLog};
use crate::metrics::EvalSet;

use super::config::{derive_seed, ExperimentConfig, ModelKind};
use super::models::{train_model, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub lr: f64,
    pub lambda: f64,
    pub d: usize,
    pub n: usize,
    pub hidden_width: usize,
    pub epochs: usize,
    pub valid_map_sym: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub trials: Vec<Trial>,
    pub best: usize,
    /// `cfg` with the best trial's hyperparameters applied.
    pub best_config: ExperimentConfig,
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn uniform_int<R: Rng>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// Writes a trial's hyperparameters into a copy of `cfg` for the searched model.
fn apply(cfg: &ExperimentConfig, kind: ModelKind, t: &Trial) -> ExperimentConfig {
    let mut out = cfg.clone();
    match kind {
        ModelKind::Hcf => {
            out.hcf_fit.lr = t.lr;
            out.hcf.embedding_decay = t.lambda;
            out.hcf.d = t.d;
            out.hcf.n = t.n;
            out.hcf.hidden = vec![t.hidden_width; out.hcf.hidden.len()];
        }
        ModelKind::MfBpr => {
            out.mf_bpr_fit.lr = t.lr;
            out.mf_bpr.lambda = t.lambda;
            out.mf_bpr.d = t.d;
        }
        ModelKind::MfImplicit => {
            out.mf_implicit_fit.lr = t.lr;
            out.mf_implicit.lambda = t.lambda;
            out.mf_implicit.d = t.d;
        }
        ModelKind::Historical => {}
    }
    out
}

/// Samples `cfg.search.trials` configurations (log-uniform learning rate
/// and regularization, uniform integers), fits each with early stopping on
/// the window ending at the last training day and keeps the best
/// validation mapSym. Ties keep the earlier trial.
pub fn run_random_search(cfg: &ExperimentConfig, log: &EventLog) -> Result<SearchResult> {
    cfg.validate()?;
    let s = &cfg.search;
    let valid_ranges = s.trials >= 1
        && s.lr.0 > 0.0
        && s.lr.0 <= s.lr.1
        && s.lambda.0 > 0.0
        && s.lambda.0 <= s.lambda.1
        && 1 <= s.d.0
        && s.d.0 <= s.d.1
        && 1 <= s.n.0
        && s.n.0 <= s.n.1
        && 1 <= s.hidden_width.0
        && s.hidden_width.0 <= s.hidden_width.1
        && s.window_days >= 7;
    if !valid_ranges {
        return Err(Error::Config(
            "search needs trials >= 1 and ordered, positive ranges".into(),
        ));
    }
    let kind = s.model;
    let train = slice_window(log, cfg.split.train_end, s.window_days).log;
    let valid = log.restrict_days(cfg.split.valid.0, cfg.split.valid.1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[u64::MAX]));
    let mut trials = Vec::with_capacity(s.trials);
    let mut best = 0;
    for trial in 0..s.trials {
        let mut t = Trial {
            trial,
            lr: log_uniform(&mut rng, s.lr),
            lambda: log_uniform(&mut rng, s.lambda),
            d: uniform_int(&mut rng, s.d),
            n: uniform_int(&mut rng, s.n),
            hidden_width: uniform_int(&mut rng, s.hidden_width),
            epochs: 0,
            valid_map_sym: f64::NAN,
        };
        let trial_cfg = apply(cfg, kind, &t);
        let set = EvalSet::new(&train, &valid, trial_cfg.history_capacity(kind))?;
        let fitted = train_model(
            &trial_cfg,
            kind,
            &train,
            Schedule::EarlyStop(&set),
            derive_seed(cfg.seed, &[u64::MAX, trial as u64]),
            None,
        )?;
        t.epochs = fitted.best_epoch;
        t.valid_map_sym = fitted
            .valid
            .map_or_else(|| set.evaluate(&fitted.model).map_sym, |r| r.map_sym);
        if t.valid_map_sym > trials.get(best).map_or(f64::NEG_INFINITY, |b: &Trial| b.valid_map_sym) {
            best = trial;
        }
        trials.push(t);
    }
    let best_config = apply(cfg, kind, &trials[best]);
    Ok(SearchResult {
        trials,
        best,
        best_config,
    })
}
