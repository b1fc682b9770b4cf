use statrs::distribution::{ChiSquared, ContinuousCDF};

use hcf_core::events::{Day, EventLog};
use hcf_core::synthetic::{drift_for_half_life, generate_synthetic, SyntheticConfig};

fn config(drift_std: f64) -> SyntheticConfig {
    SyntheticConfig {
        num_users: 60,
        num_items: 12,
        latent_dim: 4,
        drift_std,
        events_per_day: 40.0,
        num_days: 200,
        temperature: 5.0,
        mean_reverting: true,
        seed: 3,
    }
}

const USER_GROUPS: usize = 6;

/// Event counts per (user group, item) cell.
fn cell_counts(log: &EventLog, first: Day, last: Day) -> Vec<f64> {
    let mut counts = vec![0.0; USER_GROUPS * log.num_items()];
    for e in log.events_between(first, last) {
        counts[(e.user as usize % USER_GROUPS) * log.num_items() + e.item as usize] += 1.0;
    }
    counts
}

/// p-value of the chi-square homogeneity test between the (user group, item)
/// distributions of the first and last 50 days.
fn homogeneity_p(log: &EventLog) -> f64 {
    let rows = [cell_counts(log, 0, 49), cell_counts(log, 150, 199)];
    let cols: Vec<f64> = (0..rows[0].len()).map(|i| rows[0][i] + rows[1][i]).collect();
    let used: Vec<usize> = (0..cols.len()).filter(|&i| cols[i] > 0.0).collect();
    let totals: Vec<f64> = rows.iter().map(|r| r.iter().sum()).collect();
    let grand: f64 = totals.iter().sum();
    let mut stat = 0.0;
    for (r, row) in rows.iter().enumerate() {
        for &i in &used {
            let expect = totals[r] * cols[i] / grand;
            stat += (row[i] - expect).powi(2) / expect;
        }
    }
    let dof = (used.len() - 1) as f64;
    ChiSquared::new(dof).unwrap().sf(stat)
}

#[test]
fn stationary_generator_passes_homogeneity() {
    let p = homogeneity_p(&generate_synthetic(&config(0.0)));
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn strong_drift_fails_homogeneity() {
    let p = homogeneity_p(&generate_synthetic(&config(0.2)));
    assert!(p < 1e-6, "p = {p}");
}

/// Share of users whose most frequent item is the same in the first and last 50 days.
fn modal_agreement(log: &EventLog) -> f64 {
    let modal = |first, last| -> Vec<Option<u32>> {
        let mut counts = vec![vec![0u32; log.num_items()]; log.num_users()];
        for e in log.events_between(first, last) {
            counts[e.user as usize][e.item as usize] += 1;
        }
        counts
            .iter()
            .map(|c| {
                let best = c.iter().enumerate().max_by_key(|&(i, &n)| (n, std::cmp::Reverse(i)))?;
                (*best.1 > 0).then_some(best.0 as u32)
            })
            .collect()
    };
    let (a, b) = (modal(0, 49), modal(150, 199));
    let both: Vec<_> = a.iter().zip(&b).filter(|(x, y)| x.is_some() && y.is_some()).collect();
    both.iter().filter(|(x, y)| x == y).count() as f64 / both.len() as f64
}

#[test]
fn modal_items_stable_without_drift_and_not_with_it() {
    let sharp = |drift| SyntheticConfig {
        temperature: 8.0,
        ..config(drift)
    };
    let still = modal_agreement(&generate_synthetic(&sharp(0.0)));
    let moving = modal_agreement(&generate_synthetic(&sharp(0.2)));
    assert!(still >= 0.8, "{still}");
    assert!(moving <= 0.4, "{moving}");
}

#[test]
fn event_volume_matches_poisson_rate() {
    let cfg = config(0.05);
    let log = generate_synthetic(&cfg);
    let expect = cfg.events_per_day * f64::from(cfg.num_days);
    // Poisson total: sd = sqrt(expect)
    assert!(
        (log.len() as f64 - expect).abs() <= 4.0 * expect.sqrt(),
        "{}",
        log.len()
    );
    assert_eq!(log.day_range(), Some((0, cfg.num_days - 1)));
}

#[test]
fn default_config_is_the_documented_drift() {
    let cfg = SyntheticConfig::default();
    assert_eq!((cfg.num_users, cfg.num_items, cfg.num_days), (200, 500, 360));
    assert_eq!(cfg.drift_std, drift_for_half_life(60.0, cfg.latent_dim, true));
    assert!(cfg.validate().is_ok());
}
