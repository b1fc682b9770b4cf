//! Finite-difference checks of every hand-written gradient on small random problems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::{implicit_grad_check, CountMatrix, MfConfig, MfModel, MfVariant};
use crate::events::{perimeter_of, EventLog};
use crate::hcf::{HcfConfig, HcfModel};
use crate::history::HistoryIndex;
use crate::params::Parameterized;
use crate::training::{enumerate_positives, grad_check, NegativeSampler, TripletEntry};

use super::config::ModelKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub model: ModelKind,
    pub seed: u64,
    pub parameters: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

/// A random log of 5..=9 users, 6..=11 items and 30..=59 events over 12 days.
pub fn random_log<R: Rng>(rng: &mut R) -> EventLog {
    let nu = rng.random_range(5..10);
    let ni = rng.random_range(6..12);
    let n_events = rng.random_range(30..60);
    let triples: Vec<_> = (0..n_events)
        .map(|_| {
            (
                rng.random_range(0..12),
                rng.random_range(0..nu as u32),
                rng.random_range(0..ni as u32),
            )
        })
        .collect();
    let log = EventLog::from_triples(nu, ni, &triples);
    log.restrict_days(0, 11)
}

fn triplets<R: Rng>(log: &EventLog, index: &HistoryIndex, count: usize, rng: &mut R) -> Vec<TripletEntry> {
    let perimeter = perimeter_of(log);
    let mut sampler = NegativeSampler::new(index, &perimeter, false);
    let positives = enumerate_positives(log, rng);
    positives
        .iter()
        .filter_map(|&p| sampler.sample(p, rng))
        .take(count)
        .collect()
}

/// Runs the check for one model kind on the problem derived from `seed`.
/// HCF uses hidden channels [8, 8] and d = 8.
pub fn check_one(kind: ModelKind, seed: u64, epsilon: f64) -> Option<GradCheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log = random_log(&mut rng);
    let n = rng.random_range(1..6);
    let index = HistoryIndex::build(&log, n);
    let (nu, ni) = (log.num_users(), log.num_items());
    let (parameters, check) = match kind {
        ModelKind::Hcf => {
            let cfg = HcfConfig {
                d: 8,
                n,
                hidden: vec![8, 8],
                init_std: 0.5,
                ..HcfConfig::default()
            };
            let mut model = HcfModel::new(nu, ni, cfg, seed);
            // Biases start at zero; move them so the check also covers
            // layers whose inputs are not centered on the kink.
            let jitter = Normal::new(0.0, 0.1).expect("valid normal");
            for layer in model
                .user_block
                .layers
                .iter_mut()
                .chain(model.item_block.layers.iter_mut())
            {
                layer.bias.iter_mut().for_each(|b| *b = jitter.sample(&mut rng));
            }
            let batch = triplets(&log, &index, 24, &mut rng);
            (
                model.zero_grad().tensors().iter().map(Vec::len).sum(),
                grad_check(&model, &index, &batch, epsilon),
            )
        }
        ModelKind::MfBpr => {
            let cfg = MfConfig {
                d: 6,
                lambda: 0.05,
                init_std: 0.5,
                ..MfConfig::default()
            };
            let model = MfModel::new(nu, ni, MfVariant::Bpr, cfg, seed);
            let batch = triplets(&log, &index, 24, &mut rng);
            (
                model.zero_grad().tensors().iter().map(Vec::len).sum(),
                grad_check(&model, &index, &batch, epsilon),
            )
        }
        ModelKind::MfImplicit => {
            let cfg = MfConfig {
                d: 6,
                lambda: 0.05,
                alpha_conf: 4.0,
                init_std: 0.5,
                ..MfConfig::default()
            };
            let model = MfModel::new(nu, ni, MfVariant::Implicit, cfg, seed);
            let counts = CountMatrix::from_log(&log);
            (
                model.zero_grad().tensors().iter().map(Vec::len).sum(),
                implicit_grad_check(&model, &counts, epsilon),
            )
        }
        ModelKind::Historical => return None,
    };
    Some(GradCheckRow {
        model: kind,
        seed,
        parameters,
        checked: check.checked,
        skipped_kinks: check.skipped_kinks,
        max_rel_error: check.max_rel_error,
    })
}

/// Checks HCF, MF-BPR and MF-implicit on `trials` seeds starting at `first_seed`.
pub fn run_gradcheck(first_seed: u64, trials: usize, epsilon: f64) -> Vec<GradCheckRow> {
    [ModelKind::Hcf, ModelKind::MfBpr, ModelKind::MfImplicit]
        .into_iter()
        .flat_map(|kind| (0..trials as u64).filter_map(move |k| check_one(kind, first_seed + k, epsilon)))
        .collect()
}
