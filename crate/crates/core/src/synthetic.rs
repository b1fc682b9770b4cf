//! Synthetic non-stationary interaction data.
//!
//! Users and items carry latent vectors that drift with independent Gaussian
//! daily steps, either as a pure random walk or, by default, mean-reverting
//! so that latent norms (and with them the sharpness of item choice) stay
//! constant over time. Each day a Poisson number of events is drawn; an event picks
//! a user uniformly and then an item from a softmax over the user's current
//! affinities with every item.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{default_origin, EventLog, Interaction, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    /// Per-day standard deviation of each latent component's random-walk step.
    pub drift_std: f64,
    /// Mean of the Poisson daily event count.
    pub events_per_day: f64,
    pub num_days: u32,
    /// Softmax sharpness of the item choice.
    pub temperature: f64,
    /// Shrink latents by `rho = sqrt(1 - latent_dim * drift_std^2)` before
    /// each step, which keeps their variance at its initial value.
    pub mean_reverting: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// The documented drift configuration used by the window and sliding studies.
    fn default() -> Self {
        SyntheticConfig {
            num_users: 200,
            num_items: 500,
            latent_dim: 8,
            drift_std: drift_for_half_life(60.0, 8, true),
            events_per_day: 200.0,
            num_days: 360,
            temperature: 4.0,
            mean_reverting: true,
            seed: 0,
        }
    }
}

/// Step size for which a user-item affinity `u . v` keeps correlation 1/2
/// with its value `half_life_days` later. Both vectors drift, so each one
/// must keep correlation `1/sqrt(2)` with its own earlier position.
///
/// Mean-reverting latents have autocorrelation `rho^k`, giving
/// `latent_dim * std^2 = 1 - 2^(-1 / half_life)`. Pure random walks start
/// from unit expected squared norm and after `k` steps have cosine about
/// `1 / sqrt(1 + k * std^2 * latent_dim)`, giving `std^2 = 1 / (half_life * latent_dim)`.
pub fn drift_for_half_life(half_life_days: f64, latent_dim: usize, mean_reverting: bool) -> f64 {
    let dim = latent_dim as f64;
    if mean_reverting {
        ((1.0 - 2f64.powf(-1.0 / half_life_days)) / dim).sqrt()
    } else {
        (1.0 / (half_life_days * dim)).sqrt()
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts_ok = self.num_users >= 1
            && self.num_items >= 1
            && self.latent_dim >= 1
            && self.num_days >= 1
            && self.events_per_day >= 1.0;
        if !counts_ok {
            return Err(Error::Config("synthetic counts must all be at least 1".into()));
        }
        if !(self.drift_std >= 0.0 && self.drift_std.is_finite()) {
            return Err(Error::Config("drift_std must be finite and non-negative".into()));
        }
        if self.mean_reverting && self.latent_dim as f64 * self.drift_std * self.drift_std > 1.0 {
            return Err(Error::Config(
                "mean-reverting drift needs latent_dim * drift_std^2 <= 1".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Generates a log. Deterministic in `cfg`; the config must already be valid.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> EventLog {
    debug_assert!(cfg.validate().is_ok());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.latent_dim;
    let init = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid normal");
    let mut user_latent: Vec<f64> = (0..cfg.num_users * dim).map(|_| init.sample(&mut rng)).collect();
    let mut item_latent: Vec<f64> = (0..cfg.num_items * dim).map(|_| init.sample(&mut rng)).collect();
    let step = (cfg.drift_std > 0.0).then(|| Normal::new(0.0, cfg.drift_std).expect("valid normal"));
    let rho = if cfg.mean_reverting {
        (1.0 - dim as f64 * cfg.drift_std * cfg.drift_std).max(0.0).sqrt()
    } else {
        1.0
    };
    let daily = Poisson::new(cfg.events_per_day).expect("valid poisson");

    let mut events = Vec::new();
    let mut logits = vec![0.0; cfg.num_items];
    for day in 0..cfg.num_days {
        if day > 0 {
            if let Some(step) = &step {
                for v in user_latent.iter_mut().chain(item_latent.iter_mut()) {
                    *v = rho * *v + step.sample(&mut rng);
                }
            }
        }
        let count = daily.sample(&mut rng) as usize;
        for _ in 0..count {
            let user = rng.random_range(0..cfg.num_users);
            let u = &user_latent[user * dim..(user + 1) * dim];
            for (item, logit) in logits.iter_mut().enumerate() {
                let v = &item_latent[item * dim..(item + 1) * dim];
                *logit = cfg.temperature * dot(u, v);
            }
            let item = sample_softmax(&mut logits, &mut rng);
            events.push(Interaction {
                day,
                user: user as u32,
                item: item as u32,
            });
        }
    }

    let users = Vocab::from_names((0..cfg.num_users).map(|u| format!("u{u:04}")));
    let items = Vocab::from_names((0..cfg.num_items).map(|i| format!("i{i:04}")));
    let full = EventLog::new(events, users, items, default_origin());
    full.restrict_days(0, cfg.num_days - 1)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Samples an index with probability proportional to `exp(logits)`; clobbers `logits`.
fn sample_softmax<R: Rng>(logits: &mut [f64], rng: &mut R) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    let mut target = rng.random::<f64>() * total;
    for (i, w) in logits.iter().enumerate() {
        target -= w;
        if target < 0.0 {
            return i;
        }
    }
    logits.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_users: 10,
            num_items: 20,
            latent_dim: 4,
            drift_std: 0.05,
            events_per_day: 5.0,
            num_days: 30,
            temperature: 2.0,
            mean_reverting: true,
            seed: 7,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        generate_synthetic(&small()).write_csv(&mut a).unwrap();
        generate_synthetic(&small()).write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 8;
        let mut c = Vec::new();
        generate_synthetic(&other).write_csv(&mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_day() {
        let cfg = SyntheticConfig { num_days: 1, ..small() };
        let log = generate_synthetic(&cfg);
        assert!(!log.is_empty());
        assert!(log.events().iter().all(|e| e.day == 0));
    }

    #[test]
    fn config_validation() {
        assert!(small().validate().is_ok());
        assert!(SyntheticConfig {
            temperature: 0.0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            drift_std: -1.0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            num_items: 0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            drift_std: 0.6,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            drift_std: 0.6,
            mean_reverting: false,
            ..small()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn half_life_formula() {
        let s = drift_for_half_life(60.0, 8, false);
        assert!((60.0 * s * s * 8.0 - 1.0).abs() < 1e-12);
        let s = drift_for_half_life(60.0, 8, true);
        let rho = (1.0 - 8.0 * s * s).sqrt();
        assert!((rho.powi(120) - 0.5).abs() < 1e-12);
    }
}
