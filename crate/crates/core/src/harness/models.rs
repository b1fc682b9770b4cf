//! Uniform training and persistence over every model kind.

use std::path::Path;

use crate::baselines::{fit_implicit, HistoricalModel, MfModel, MfVariant};
use crate::error::{Error, Result};
use crate::events::{Day, EventLog, Vocab};
use crate::hcf::{EmbeddingTable, HcfModel};
use crate::history::HistoryIndex;
use crate::metrics::{EvalSet, MetricsReport, Scorer};
use crate::params;
use crate::training::{fit, EpochTrace, FitConfig};

use super::config::{ExperimentConfig, ModelKind};

#[derive(Clone, Debug)]
pub enum TrainedModel {
    Historical(HistoricalModel),
    MfImplicit(MfModel),
    MfBpr(MfModel),
    Hcf(HcfModel),
}

impl Scorer for TrainedModel {
    fn score_matrix(&self, index: &HistoryIndex, day: Day, users: &[u32], items: &[u32]) -> Vec<f64> {
        match self {
            TrainedModel::Historical(m) => m.score_matrix(index, day, users, items),
            TrainedModel::MfImplicit(m) | TrainedModel::MfBpr(m) => m.score_matrix(index, day, users, items),
            TrainedModel::Hcf(m) => m.score_matrix(index, day, users, items),
        }
    }
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Historical(_) => ModelKind::Historical,
            TrainedModel::MfImplicit(_) => ModelKind::MfImplicit,
            TrainedModel::MfBpr(_) => ModelKind::MfBpr,
            TrainedModel::Hcf(_) => ModelKind::Hcf,
        }
    }

    /// Writes the model; `meta` is stored under `extra` in the header.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let out = std::io::BufWriter::new(file);
        match self {
            TrainedModel::Historical(m) => m.save(out, meta),
            TrainedModel::MfImplicit(m) | TrainedModel::MfBpr(m) => m.save(out, meta),
            TrainedModel::Hcf(m) => m.save(out, meta),
        }
    }

    /// Reads a model file, returning the model and its `extra` metadata.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, _) = params::read_container(&bytes[..])?;
        let extra = header.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        let model = match header.kind.as_str() {
            "historical" => TrainedModel::Historical(HistoricalModel::load(&bytes[..])?),
            "hcf" => TrainedModel::Hcf(HcfModel::load(&bytes[..])?),
            _ => {
                let m = MfModel::load(&bytes[..])?;
                match m.variant {
                    MfVariant::Implicit => TrainedModel::MfImplicit(m),
                    MfVariant::Bpr => TrainedModel::MfBpr(m),
                }
            }
        };
        Ok((model, extra))
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: TrainedModel,
    pub trace: Vec<EpochTrace>,
    /// Epochs kept; 0 for the count model.
    pub best_epoch: usize,
    pub valid: Option<MetricsReport>,
    pub skipped_negatives: usize,
}

/// How long to train.
#[derive(Clone, Copy, Debug)]
pub enum Schedule<'a> {
    /// Early stopping on the symmetrized mAP of the given set.
    EarlyStop(&'a EvalSet),
    /// Exactly this many epochs.
    Fixed(usize),
}

/// Fits `kind` on `train` with the hyperparameters in `cfg`.
///
/// `warm` optionally provides a previously trained model of the same kind;
/// rows of entities it shares with `train` (matched by name) and any
/// entity-independent parameters are copied into the fresh initialization.
pub fn train_model(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    train: &EventLog,
    schedule: Schedule<'_>,
    seed: u64,
    warm: Option<(&TrainedModel, &Vocab, &Vocab)>,
) -> Result<Trained> {
    if train.is_empty() {
        return Err(Error::EmptyLog("training window".into()));
    }
    let (validation, fixed) = match schedule {
        Schedule::EarlyStop(v) => (Some(v), None),
        Schedule::Fixed(e) => (None, Some(e)),
    };
    let with_epochs = |base: &FitConfig| match fixed {
        Some(e) => FitConfig {
            max_epochs: e.max(1),
            ..base.clone()
        },
        None => base.clone(),
    };
    let (nu, ni) = (train.num_users(), train.num_items());
    let capacity = cfg.history_capacity(kind);
    match kind {
        ModelKind::Historical => {
            let model = HistoricalModel::fit(train);
            let valid = validation.map(|v| v.evaluate(&model));
            Ok(Trained {
                model: TrainedModel::Historical(model),
                trace: Vec::new(),
                best_epoch: 0,
                valid,
                skipped_negatives: 0,
            })
        }
        ModelKind::MfImplicit => {
            let mut model = MfModel::new(nu, ni, MfVariant::Implicit, cfg.mf_implicit.clone(), seed);
            if let Some((TrainedModel::MfImplicit(prev), pu, pi)) = warm {
                warm_mf(&mut model, prev, pu, pi, train);
            }
            let f = &cfg.mf_implicit_fit;
            let out = fit_implicit(
                model,
                train,
                validation,
                f.lr,
                fixed.unwrap_or(f.max_epochs).max(1),
                f.patience,
            )?;
            Ok(Trained {
                model: TrainedModel::MfImplicit(out.model),
                trace: out.trace,
                best_epoch: out.best_epoch,
                valid: out.best_valid,
                skipped_negatives: 0,
            })
        }
        ModelKind::MfBpr => {
            let mut model = MfModel::new(nu, ni, MfVariant::Bpr, cfg.mf_bpr.clone(), seed);
            if let Some((TrainedModel::MfBpr(prev), pu, pi)) = warm {
                warm_mf(&mut model, prev, pu, pi, train);
            }
            let out = fit(
                model,
                train,
                validation,
                capacity,
                &with_epochs(&cfg.mf_bpr_fit),
                seed,
                cfg.timings,
            )?;
            Ok(Trained {
                model: TrainedModel::MfBpr(out.model),
                trace: out.trace,
                best_epoch: out.best_epoch,
                valid: out.best_valid,
                skipped_negatives: out.skipped_negatives,
            })
        }
        ModelKind::Hcf => {
            let mut model = HcfModel::new(nu, ni, cfg.hcf.clone(), seed);
            if let Some((TrainedModel::Hcf(prev), pu, pi)) = warm {
                if prev.config == model.config {
                    copy_rows(&prev.user_table, pu, &mut model.user_table, train.users());
                    copy_rows(&prev.item_table, pi, &mut model.item_table, train.items());
                    model.user_block = prev.user_block.clone();
                    model.item_block = prev.item_block.clone();
                }
            }
            let out = fit(
                model,
                train,
                validation,
                capacity,
                &with_epochs(&cfg.hcf_fit),
                seed,
                cfg.timings,
            )?;
            Ok(Trained {
                model: TrainedModel::Hcf(out.model),
                trace: out.trace,
                best_epoch: out.best_epoch,
                valid: out.best_valid,
                skipped_negatives: out.skipped_negatives,
            })
        }
    }
}

fn warm_mf(model: &mut MfModel, prev: &MfModel, prev_users: &Vocab, prev_items: &Vocab, train: &EventLog) {
    if prev.config.d == model.config.d {
        copy_rows(&prev.user_factors, prev_users, &mut model.user_factors, train.users());
        copy_rows(&prev.item_factors, prev_items, &mut model.item_factors, train.items());
    }
}

fn copy_rows(src: &EmbeddingTable, src_vocab: &Vocab, dst: &mut EmbeddingTable, dst_vocab: &Vocab) {
    for (id, name) in dst_vocab.names().iter().enumerate() {
        if let Some(old) = src_vocab.get(name) {
            dst.row_mut(id as u32).copy_from_slice(src.row(old));
        }
    }
}
