//! Static benchmark recommenders: interaction counts, confidence-weighted
//! matrix factorization trained by full-batch gradient descent, and matrix
//! factorization under the pairwise ranking objective.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Day, EventLog};
use crate::hcf::{dot, EmbeddingTable};
use crate::history::HistoryIndex;
use crate::metrics::{EvalSet, MetricsReport, Scorer};
use crate::params::{self, GradBuffer, Parameterized, TensorSpec};
use crate::training::{
    relative_error, softplus, EarlyStopping, EpochTrace, GradCheck, PairwiseModel, Side, TripletEntry,
};

/// Scores a pair by how often it interacted in the training window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HistoricalModel {
    counts: HashMap<(u32, u32), u32>,
}

impl HistoricalModel {
    pub fn fit(log: &EventLog) -> Self {
        let mut counts = HashMap::new();
        for e in log.events() {
            *counts.entry((e.user, e.item)).or_insert(0) += 1;
        }
        HistoricalModel { counts }
    }

    pub fn count(&self, user: u32, item: u32) -> u32 {
        self.counts.get(&(user, item)).copied().unwrap_or(0)
    }

    pub fn num_pairs(&self) -> usize {
        self.counts.len()
    }

    pub fn save<W: std::io::Write>(&self, out: W, meta: serde_json::Value) -> Result<()> {
        let mut pairs: Vec<_> = self.counts.iter().map(|(&(u, i), &c)| (u, i, c)).collect();
        pairs.sort_unstable();
        let flat: Vec<f64> = pairs
            .iter()
            .flat_map(|&(u, i, c)| [u as f64, i as f64, c as f64])
            .collect();
        let specs = [TensorSpec::new("pair_counts", &[pairs.len(), 3])];
        params::write_container(
            out,
            "historical",
            serde_json::json!({ "extra": meta }),
            &specs,
            &[&flat],
        )
    }

    pub fn load<R: std::io::Read>(input: R) -> Result<Self> {
        let (header, tensors) = params::read_container(input)?;
        if header.kind != "historical" || tensors.len() != 1 {
            return Err(Error::ModelFormat(format!(
                "expected historical model, found {}",
                header.kind
            )));
        }
        let mut counts = HashMap::new();
        for row in tensors[0].chunks_exact(3) {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0 && v.fract() == 0.0)) {
                return Err(Error::ModelFormat("pair counts must be non-negative integers".into()));
            }
            counts.insert((row[0] as u32, row[1] as u32), row[2] as u32);
        }
        Ok(HistoricalModel { counts })
    }
}

impl Scorer for HistoricalModel {
    fn score_matrix(&self, _index: &HistoryIndex, _day: Day, users: &[u32], items: &[u32]) -> Vec<f64> {
        let mut out = Vec::with_capacity(users.len() * items.len());
        for &u in users {
            out.extend(items.iter().map(|&i| self.count(u, i) as f64));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfVariant {
    Implicit,
    Bpr,
}

impl MfVariant {
    fn tag(self) -> &'static str {
        match self {
            MfVariant::Implicit => "mf_implicit",
            MfVariant::Bpr => "mf_bpr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfConfig {
    pub d: usize,
    /// L2 coefficient.
    pub lambda: f64,
    /// Confidence slope `c = 1 + alpha_conf * count` (implicit variant).
    pub alpha_conf: f64,
    pub init_std: f64,
    /// Gradient steps per epoch (implicit variant).
    pub steps_per_epoch: usize,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            d: 32,
            lambda: 0.01,
            alpha_conf: 40.0,
            init_std: 0.1,
            steps_per_epoch: 10,
        }
    }
}

/// Pure dot-product matrix factorization, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct MfModel {
    pub user_factors: EmbeddingTable,
    pub item_factors: EmbeddingTable,
    pub variant: MfVariant,
    pub config: MfConfig,
}

impl MfModel {
    pub fn new(num_users: usize, num_items: usize, variant: MfVariant, config: MfConfig, seed: u64) -> Self {
        assert!(config.d >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MfModel {
            user_factors: EmbeddingTable::random_normal(num_users, config.d, config.init_std, &mut rng),
            item_factors: EmbeddingTable::random_normal(num_items, config.d, config.init_std, &mut rng),
            variant,
            config,
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_factors.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_factors.rows()
    }

    /// Time-invariant score of a pair.
    pub fn score(&self, user: u32, item: u32) -> Result<f64> {
        if user as usize >= self.num_users() {
            return Err(Error::UnknownEntity { kind: "user", id: user });
        }
        if item as usize >= self.num_items() {
            return Err(Error::UnknownEntity { kind: "item", id: item });
        }
        Ok(dot(self.user_factors.row(user), self.item_factors.row(item)))
    }

    pub fn save<W: std::io::Write>(&self, out: W, meta: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "num_users": self.num_users(),
            "num_items": self.num_items(),
            "variant": self.variant,
            "config": self.config,
            "extra": meta,
        });
        params::write_container(out, self.variant.tag(), meta, &self.tensor_specs(), &self.tensors())
    }

    pub fn load<R: std::io::Read>(input: R) -> Result<Self> {
        let (header, tensors) = params::read_container(input)?;
        let field = |k: &str| {
            header
                .meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::ModelFormat(format!("missing {k}")))
        };
        let variant: MfVariant = serde_json::from_value(field("variant")?)?;
        if header.kind != variant.tag() {
            return Err(Error::ModelFormat(format!(
                "kind {} does not match variant",
                header.kind
            )));
        }
        let mut model = MfModel::new(
            serde_json::from_value(field("num_users")?)?,
            serde_json::from_value(field("num_items")?)?,
            variant,
            serde_json::from_value(field("config")?)?,
            0,
        );
        params::load_into(&mut model, &header, tensors)?;
        Ok(model)
    }
}

impl Parameterized for MfModel {
    fn tensor_specs(&self) -> Vec<TensorSpec> {
        vec![
            TensorSpec::new("user_factors", &[self.user_factors.rows(), self.user_factors.dim()]),
            TensorSpec::new("item_factors", &[self.item_factors.rows(), self.item_factors.dim()]),
        ]
    }

    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.user_factors.values(), self.item_factors.values()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.user_factors.values_mut(), self.item_factors.values_mut()]
    }
}

impl Scorer for MfModel {
    fn score_matrix(&self, _index: &HistoryIndex, _day: Day, users: &[u32], items: &[u32]) -> Vec<f64> {
        let mut out = Vec::with_capacity(users.len() * items.len());
        for &u in users {
            let x = self.user_factors.row(u);
            out.extend(items.iter().map(|&i| dot(x, self.item_factors.row(i))));
        }
        out
    }
}

const USERS: usize = 0;
const ITEMS: usize = 1;

impl PairwiseModel for MfModel {
    fn entry_loss(&self, _index: &HistoryIndex, entry: &TripletEntry) -> f64 {
        let x = |u: u32| self.user_factors.row(u);
        let y = |i: u32| self.item_factors.row(i);
        let sq = |v: &[f64]| dot(v, v);
        let (diff, reg) = match entry.side {
            Side::User => (
                dot(x(entry.user), y(entry.item)) - dot(x(entry.user), y(entry.negative)),
                sq(x(entry.user)) + sq(y(entry.item)) + sq(y(entry.negative)),
            ),
            Side::Item => (
                dot(x(entry.user), y(entry.item)) - dot(x(entry.negative), y(entry.item)),
                sq(x(entry.user)) + sq(x(entry.negative)) + sq(y(entry.item)),
            ),
        };
        softplus(-diff) + self.config.lambda * reg
    }

    fn backward(&self, index: &HistoryIndex, entry: &TripletEntry, scale: f64, grad: &mut GradBuffer) -> f64 {
        let d = self.config.d;
        let lambda = self.config.lambda;
        let x = |u: u32| self.user_factors.row(u);
        let y = |i: u32| self.item_factors.row(i);
        let loss = self.entry_loss(index, entry);
        match entry.side {
            Side::User => {
                let (xu, yi, yj) = (x(entry.user), y(entry.item), y(entry.negative));
                let g = -crate::hcf::sigmoid(-(dot(xu, yi) - dot(xu, yj)));
                let du: Vec<f64> = yi
                    .iter()
                    .zip(yj)
                    .zip(xu)
                    .map(|((a, b), w)| g * (a - b) + 2.0 * lambda * w)
                    .collect();
                let di: Vec<f64> = xu.iter().zip(yi).map(|(a, w)| g * a + 2.0 * lambda * w).collect();
                let dj: Vec<f64> = xu.iter().zip(yj).map(|(a, w)| -g * a + 2.0 * lambda * w).collect();
                grad.add_scaled(USERS, entry.user as usize * d, &du, scale);
                grad.add_scaled(ITEMS, entry.item as usize * d, &di, scale);
                grad.add_scaled(ITEMS, entry.negative as usize * d, &dj, scale);
            }
            Side::Item => {
                let (xu, xv, yi) = (x(entry.user), x(entry.negative), y(entry.item));
                let g = -crate::hcf::sigmoid(-(dot(xu, yi) - dot(xv, yi)));
                let di: Vec<f64> = xu
                    .iter()
                    .zip(xv)
                    .zip(yi)
                    .map(|((a, b), w)| g * (a - b) + 2.0 * lambda * w)
                    .collect();
                let du: Vec<f64> = yi.iter().zip(xu).map(|(a, w)| g * a + 2.0 * lambda * w).collect();
                let dv: Vec<f64> = yi.iter().zip(xv).map(|(a, w)| -g * a + 2.0 * lambda * w).collect();
                grad.add_scaled(USERS, entry.user as usize * d, &du, scale);
                grad.add_scaled(USERS, entry.negative as usize * d, &dv, scale);
                grad.add_scaled(ITEMS, entry.item as usize * d, &di, scale);
            }
        }
        loss
    }
}

/// Interaction counts `r_ui` of a training window, dense `users x items`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountMatrix {
    users: usize,
    items: usize,
    counts: Vec<u32>,
}

impl CountMatrix {
    pub fn from_log(log: &EventLog) -> Self {
        let (users, items) = (log.num_users(), log.num_items());
        let mut counts = vec![0; users * items];
        for e in log.events() {
            counts[e.user as usize * items + e.item as usize] += 1;
        }
        CountMatrix { users, items, counts }
    }

    pub fn get(&self, user: usize, item: usize) -> u32 {
        self.counts[user * self.items + item]
    }
}

/// Confidence-weighted squared loss over every (user, item) pair plus L2:
/// `sum c_ui (p_ui - x_u . y_i)^2 + lambda (|X|^2 + |Y|^2)`, with
/// `p_ui = [r_ui > 0]` and `c_ui = 1 + alpha_conf r_ui`.
/// Adds the gradient into `grad` when given.
pub fn mf_implicit_objective(model: &MfModel, counts: &CountMatrix, mut grad: Option<&mut GradBuffer>) -> f64 {
    assert_eq!((counts.users, counts.items), (model.num_users(), model.num_items()));
    let d = model.config.d;
    let (alpha, lambda) = (model.config.alpha_conf, model.config.lambda);
    let mut loss = 0.0;
    let mut du = vec![0.0; d];
    let mut di_all = vec![0.0; counts.items * d];
    for u in 0..counts.users {
        let x = model.user_factors.row(u as u32);
        du.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..counts.items {
            let y = model.item_factors.row(i as u32);
            let r = counts.get(u, i);
            let p = if r > 0 { 1.0 } else { 0.0 };
            let c = 1.0 + alpha * r as f64;
            let err = p - dot(x, y);
            loss += c * err * err;
            if grad.is_some() {
                let w = -2.0 * c * err;
                for k in 0..d {
                    du[k] += w * y[k];
                    di_all[i * d + k] += w * x[k];
                }
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            for k in 0..d {
                du[k] += 2.0 * lambda * x[k];
            }
            g.add_scaled(USERS, u * d, &du, 1.0);
        }
    }
    let reg = |t: &EmbeddingTable| t.values().iter().map(|v| v * v).sum::<f64>();
    loss += lambda * (reg(&model.user_factors) + reg(&model.item_factors));
    if let Some(g) = grad {
        for i in 0..counts.items {
            let y = model.item_factors.row(i as u32);
            let row: Vec<f64> = (0..d).map(|k| di_all[i * d + k] + 2.0 * lambda * y[k]).collect();
            g.add_scaled(ITEMS, i * d, &row, 1.0);
        }
    }
    loss
}

/// Largest relative error between the analytic gradient of
/// [`mf_implicit_objective`] and central differences, over every parameter.
pub fn implicit_grad_check(model: &MfModel, counts: &CountMatrix, epsilon: f64) -> GradCheck {
    let mut grad = model.zero_grad();
    mf_implicit_objective(model, counts, Some(&mut grad));
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for t in 0..grad.tensors().len() {
        for o in 0..grad.tensor(t).len() {
            let original = probe.tensors()[t][o];
            probe.tensors_mut()[t][o] = original + epsilon;
            let up = mf_implicit_objective(&probe, counts, None);
            probe.tensors_mut()[t][o] = original - epsilon;
            let down = mf_implicit_objective(&probe, counts, None);
            probe.tensors_mut()[t][o] = original;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.tensor(t)[o], numeric));
        }
    }
    GradCheck {
        max_rel_error: worst,
        checked: grad.tensors().iter().map(Vec::len).sum(),
        skipped_kinks: 0,
    }
}

/// One full-batch gradient step; returns the objective after the step.
pub fn mf_implicit_step(model: &mut MfModel, counts: &CountMatrix, lr: f64) -> Result<f64> {
    debug_assert_eq!(model.variant, MfVariant::Implicit);
    let mut grad = model.zero_grad();
    mf_implicit_objective(model, counts, Some(&mut grad));
    for (p, g) in model.tensors_mut().into_iter().zip(grad.tensors()) {
        for (w, d) in p.iter_mut().zip(g) {
            *w -= lr * d;
        }
    }
    let loss = mf_implicit_objective(model, counts, None);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Divergence { epoch: 0 })
    }
}

/// Outcome of [`fit_implicit`]; mirrors [`crate::training::FitOutcome`].
#[derive(Clone, Debug)]
pub struct ImplicitFit {
    pub model: MfModel,
    pub trace: Vec<EpochTrace>,
    pub best_epoch: usize,
    pub best_valid: Option<MetricsReport>,
}

/// Full-batch gradient descent with optional early stopping on validation mAP.
pub fn fit_implicit(
    mut model: MfModel,
    train: &EventLog,
    validation: Option<&EvalSet>,
    lr: f64,
    max_epochs: usize,
    patience: usize,
) -> Result<ImplicitFit> {
    let counts = CountMatrix::from_log(train);
    let mut stopper = EarlyStopping::new(patience);
    let mut trace = Vec::new();
    let mut best_valid = None;
    for epoch in 1..=max_epochs {
        let mut loss = 0.0;
        for _ in 0..model.config.steps_per_epoch.max(1) {
            loss = mf_implicit_step(&mut model, &counts, lr).map_err(|_| Error::Divergence { epoch })?;
        }
        let report = validation.map(|v| v.evaluate(&model));
        trace.push(EpochTrace {
            epoch,
            train_loss: loss,
            valid_map_u: report.as_ref().map(|r| r.map_user),
            valid_map_i: report.as_ref().map(|r| r.map_item),
            valid_map_sym: report.as_ref().map(|r| r.map_sym),
            seconds: 0.0,
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
    if validation.is_some() {
        let best_epoch = stopper.best_epoch();
        let model = stopper.into_best().expect("at least one epoch");
        Ok(ImplicitFit {
            model,
            trace,
            best_epoch,
            best_valid,
        })
    } else {
        let best_epoch = trace.len();
        Ok(ImplicitFit {
            model,
            trace,
            best_epoch,
            best_valid,
        })
    }
}
