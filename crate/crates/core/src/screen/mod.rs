//! Stage two: probabilistic quality screening.
//!
//! Each window is summarized by `[std, mean, entropy]` (per sensor channel,
//! averaged across channels), a two-component mixture is fitted to those
//! features, and windows are kept when their posterior for the high-quality
//! component clears a threshold chosen by Bayesian optimization.

mod gmm;

use serde::{Deserialize, Serialize};

pub use gmm::{fit_gmm, posterior_hq, GmmFit, GmmModel};

use crate::error::{Error, Result};
use crate::gp::{bayes_opt, TraceRecord};
use crate::series::Window;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreenConfig {
    pub entropy_bins: usize,
    pub lambda: f64,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub cov_reg: f64,
    pub kl_bins: usize,
    pub kl_smoothing: f64,
    /// Fraction of windows the threshold should keep. `None` optimizes the
    /// plain retention-minus-KL objective.
    pub target_retention: Option<f64>,
    /// Take the `1 - target_retention` quantile of the posteriors directly
    /// instead of optimizing.
    pub hard_quota: bool,
    pub bo_budget: usize,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        ScreenConfig {
            entropy_bins: 16,
            lambda: 1.0,
            em_max_iters: 200,
            em_tol: 1e-6,
            cov_reg: 1e-6,
            kl_bins: 32,
            kl_smoothing: 1e-6,
            target_retention: Some(0.9),
            hard_quota: false,
            bo_budget: 30,
        }
    }
}

impl ScreenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entropy_bins < 2 || self.kl_bins < 2 {
            return Err(Error::Config("histogram bin counts must be >= 2".into()));
        }
        if !(self.kl_smoothing > 0.0) {
            return Err(Error::Config("kl_smoothing must be > 0".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if let Some(t) = self.target_retention {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("target_retention must lie in (0, 1], got {t}")));
            }
        } else if self.hard_quota {
            return Err(Error::Config("hard_quota needs target_retention".into()));
        }
        Ok(())
    }
}

/// `[std, mean, entropy]` of one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowFeatures {
    pub f: [f64; 3],
}

impl WindowFeatures {
    pub fn std(&self) -> f64 {
        self.f[0]
    }

    pub fn mean(&self) -> f64 {
        self.f[1]
    }

    pub fn entropy(&self) -> f64 {
        self.f[2]
    }
}

/// Shannon entropy (nats) of an equal-width histogram over `[min, max]`.
pub fn shannon_entropy(samples: &[f64], bins: usize) -> f64 {
    let Some(&first) = samples.first() else { return 0.0 };
    let (lo, hi) = samples.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo || bins < 2 {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    let width = (hi - lo) / bins as f64;
    for &v in samples {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = samples.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Per-channel std (population), mean and entropy of the sensor columns,
/// each averaged across channels. The RUL column is excluded.
pub fn window_features(window: &Window, config: &ScreenConfig) -> WindowFeatures {
    let d = window.sensors();
    if d == 0 || window.is_empty() {
        return WindowFeatures { f: [0.0; 3] };
    }
    let n = window.len() as f64;
    let mut acc = [0.0; 3];
    for j in 0..d {
        let col = window.column(j);
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        acc[0] += var.sqrt();
        acc[1] += mean;
        acc[2] += shannon_entropy(&col, config.entropy_bins);
    }
    WindowFeatures {
        f: acc.map(|a| a / d as f64),
    }
}

fn histogram(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize, smoothing: f64) -> Vec<f64> {
    let mut h = vec![smoothing; bins];
    let width = (hi - lo) / bins as f64;
    for v in values {
        let b = if width > 0.0 {
            (((v - lo) / width).max(0.0) as usize).min(bins - 1)
        } else {
            0
        };
        h[b] += 1.0;
    }
    let total: f64 = h.iter().sum();
    h.iter_mut().for_each(|p| *p /= total);
    h
}

/// Discrete `KL(p || q)` of two normalized histograms.
pub fn discrete_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Sum over the three feature dimensions of the smoothed-histogram
/// divergence `KL(retained || full)`, with bin edges spanning the full set.
pub fn kl_penalty(retained: &[WindowFeatures], full: &[WindowFeatures], config: &ScreenConfig) -> f64 {
    if full.is_empty() {
        return 0.0;
    }
    (0..3)
        .map(|k| {
            let (lo, hi) = full
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| (lo.min(f.f[k]), hi.max(f.f[k])));
            let p = histogram(retained.iter().map(|f| f.f[k]), lo, hi, config.kl_bins, config.kl_smoothing);
            let q = histogram(full.iter().map(|f| f.f[k]), lo, hi, config.kl_bins, config.kl_smoothing);
            discrete_kl(&p, &q)
        })
        .sum()
}

/// Retained count minus `lambda` times the KL penalty at threshold `theta`.
pub fn threshold_objective(theta: f64, q: &[f64], features: &[WindowFeatures], config: &ScreenConfig) -> f64 {
    let retained: Vec<WindowFeatures> = q
        .iter()
        .zip(features)
        .filter(|(&qk, _)| qk >= theta)
        .map(|(_, f)| *f)
        .collect();
    retained.len() as f64 - config.lambda * kl_penalty(&retained, features, config)
}

/// Objective used when a retention target is set: distance of the retained
/// count from the target, minus the KL penalty.
pub fn targeted_objective(theta: f64, q: &[f64], features: &[WindowFeatures], config: &ScreenConfig, target: f64) -> f64 {
    let retained: Vec<WindowFeatures> = q
        .iter()
        .zip(features)
        .filter(|(&qk, _)| qk >= theta)
        .map(|(_, f)| *f)
        .collect();
    let goal = target * q.len() as f64;
    -(retained.len() as f64 - goal).abs() - config.lambda * kl_penalty(&retained, features, config)
}

/// Maps a search coordinate `u` in `[0, 1]` onto a threshold that discards
/// `round(u * K)` windows with the smallest posteriors.
///
/// The objective only changes value at the observed posteriors, so searching
/// over their ranks reaches every distinct objective value, even when the
/// posteriors are packed within `1e-12` of 0 or 1.
pub fn threshold_at(u: f64, sorted_q: &[f64]) -> f64 {
    let k = sorted_q.len();
    let m = (u.clamp(0.0, 1.0) * k as f64).round() as usize;
    if m == 0 || k == 0 {
        0.0
    } else if m >= k {
        sorted_q[k - 1].next_up()
    } else if sorted_q[m - 1] == sorted_q[m] {
        sorted_q[m]
    } else {
        sorted_q[m - 1] + (sorted_q[m] - sorted_q[m - 1]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdOutcome {
    pub theta: f64,
    pub objective: f64,
    pub retained: usize,
    pub trace: Vec<TraceRecord>,
}

/// Chooses the retention threshold.
///
/// With `target_retention` unset this maximizes [`threshold_objective`];
/// with it set, [`targeted_objective`]. `hard_quota` skips the search and
/// returns the quantile threshold. Trace `theta` values are thresholds, not
/// search coordinates.
pub fn optimize_threshold(
    q: &[f64],
    features: &[WindowFeatures],
    config: &ScreenConfig,
    budget: usize,
    seed: u64,
) -> Result<ThresholdOutcome> {
    config.validate()?;
    if q.len() != features.len() {
        return Err(Error::arg(format!(
            "{} posteriors but {} feature vectors",
            q.len(),
            features.len()
        )));
    }
    let mut sorted = q.to_vec();
    sorted.sort_by(f64::total_cmp);
    let count = |theta: f64| q.iter().filter(|&&v| v >= theta).count();

    if config.hard_quota {
        let target = config.target_retention.expect("validated");
        let theta = threshold_at(1.0 - target, &sorted);
        return Ok(ThresholdOutcome {
            theta,
            objective: targeted_objective(theta, q, features, config, target),
            retained: count(theta),
            trace: Vec::new(),
        });
    }

    let eval = |theta: f64| match config.target_retention {
        Some(t) => targeted_objective(theta, q, features, config, t),
        None => threshold_objective(theta, q, features, config),
    };
    let result = bayes_opt(|u| Ok(eval(threshold_at(u, &sorted))), budget, seed)?;
    let theta = threshold_at(result.theta, &sorted);
    let trace = result
        .trace
        .into_iter()
        .map(|t| TraceRecord {
            theta: threshold_at(t.theta, &sorted),
            ..t
        })
        .collect();
    Ok(ThresholdOutcome {
        theta,
        objective: result.value,
        retained: count(theta),
        trace,
    })
}

/// Keeps windows with `q >= theta`.
pub fn prune_quality(q: &[f64], theta: f64) -> Vec<bool> {
    q.iter().map(|&v| v >= theta).collect()
}

/// Per-window screening record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenRecord {
    pub id: usize,
    pub f: [f64; 3],
    pub q: f64,
    pub retained: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window(values: Vec<Vec<f64>>) -> Window {
        Window {
            unit_id: "u".into(),
            rul_level: 0.0,
            start: 0,
            label: values.last().map_or(0.0, |r| *r.last().unwrap()),
            values,
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, n: usize) -> Vec<WindowFeatures> {
        (0..n)
            .map(|_| WindowFeatures {
                f: [rng.random_range(0.0..0.3), rng.random_range(0.0..1.0), rng.random_range(1.0..2.7)],
            })
            .collect()
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(shannon_entropy(&[3.0; 10], 16), 0.0);
        let uniform: Vec<f64> = (0..16).map(|b| b as f64).collect();
        assert!((shannon_entropy(&uniform, 16) - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let n = rng.random_range(2..200);
            let bins = rng.random_range(2..40);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut h = 0.0;
            for b in 0..bins {
                let c = xs
                    .iter()
                    .filter(|&&x| {
                        let idx = (((x - lo) / ((hi - lo) / bins as f64)) as usize).min(bins - 1);
                        idx == b
                    })
                    .count();
                if c > 0 {
                    let p = c as f64 / n as f64;
                    h -= p * p.ln();
                }
            }
            assert!((shannon_entropy(&xs, bins) - h).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_window_features() {
        let w = window(vec![vec![2.5, 2.5, 9.0]; 20]);
        let f = window_features(&w, &ScreenConfig::default());
        assert_eq!(f.f, [0.0, 2.5, 0.0]);
    }

    #[test]
    fn uniform_window_has_max_entropy() {
        let rows: Vec<Vec<f64>> = (0..32).map(|t| vec![(t % 16) as f64, ((t * 3) % 16) as f64, 1.0]).collect();
        let f = window_features(&window(rows), &ScreenConfig::default());
        assert!((f.entropy() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn features_match_per_channel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = ScreenConfig::default();
        for _ in 0..10 {
            let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let w = window(rows.clone());
            let got = window_features(&w, &config);
            let (mut s, mut m, mut h) = (0.0, 0.0, 0.0);
            for j in 0..4 {
                let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                let mut mean = 0.0;
                for v in &col {
                    mean += v;
                }
                mean /= 50.0;
                let mut var = 0.0;
                for v in &col {
                    var += (v - mean) * (v - mean);
                }
                s += (var / 50.0).sqrt();
                m += mean;
                h += shannon_entropy(&col, 16);
            }
            let want = [s / 4.0, m / 4.0, h / 4.0];
            for k in 0..3 {
                assert!((got.f[k] - want[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_identical_is_zero_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let config = ScreenConfig::default();
        let full = random_features(&mut rng, 200);
        assert!(kl_penalty(&full, &full, &config) <= 1e-12);
        for _ in 0..50 {
            let k = rng.random_range(0..200);
            let subset: Vec<_> = full.iter().take(k).copied().collect();
            assert!(kl_penalty(&subset, &full, &config) >= 0.0);
        }
        // empty retained set falls back to the smoothed uniform histogram
        let empty = kl_penalty(&[], &full, &config);
        assert!(empty.is_finite() && empty >= 0.0);
    }

    #[test]
    fn discrete_kl_term_by_term() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let q = [0.25, 0.25, 0.25, 0.25];
        let want = 0.1 * (0.1f64 / 0.25).ln() + 0.2 * (0.2f64 / 0.25).ln() + 0.3 * (0.3f64 / 0.25).ln() + 0.4 * (0.4f64 / 0.25).ln();
        assert!((discrete_kl(&p, &q) - want).abs() < 1e-12);
        assert_eq!(discrete_kl(&q, &q), 0.0);
    }

    #[test]
    fn objective_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = ScreenConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let feats = random_features(&mut rng, 3);
        assert_eq!(threshold_objective(0.5, &[0.1, 0.5, 0.9], &feats, &config), 2.0);
        let feats = random_features(&mut rng, 40);
        let q: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        let j0 = threshold_objective(0.0, &q, &feats, &ScreenConfig::default());
        assert!((j0 - 40.0).abs() < 1e-9);
    }

    #[test]
    fn lambda_zero_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = random_features(&mut rng, 60);
        let q: Vec<f64> = (0..60).map(|_| rng.random_range(0.2..1.0)).collect();
        let config = ScreenConfig {
            lambda: 0.0,
            target_retention: None,
            ..Default::default()
        };
        let out = optimize_threshold(&q, &feats, &config, 15, 0).unwrap();
        assert_eq!(out.retained, 60);
        let again = optimize_threshold(&q, &feats, &config, 15, 0).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn targeted_search_hits_retention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = random_features(&mut rng, 500);
        // posteriors saturated near 1 with a tail near 0
        let q: Vec<f64> = (0..500)
            .map(|i| if i % 4 == 0 { rng.random_range(0.0..1e-8) } else { 1.0 - rng.random_range(0.0..1e-13) })
            .collect();
        let out = optimize_threshold(&q, &feats, &ScreenConfig::default(), 30, 5).unwrap();
        let frac = out.retained as f64 / 500.0;
        assert!((frac - 0.9).abs() <= 0.05, "{frac}");
        let quota = optimize_threshold(&q, &feats, &ScreenConfig { hard_quota: true, ..Default::default() }, 30, 5).unwrap();
        assert_eq!(quota.retained, 450);
    }

    #[test]
    fn threshold_mapping_edges() {
        let sorted = [0.1, 0.4, 0.4, 0.8];
        assert_eq!(threshold_at(0.0, &sorted), 0.0);
        assert!(threshold_at(1.0, &sorted) > 0.8);
        assert_eq!(prune_quality(&sorted, threshold_at(1.0, &sorted)), vec![false; 4]);
        assert_eq!(threshold_at(0.25, &sorted), 0.25);
        assert_eq!(prune_quality(&sorted, 0.0), vec![true; 4]);
        assert_eq!(prune_quality(&[1.0, 0.99], 1.0f64.next_up()), vec![false, false]);
    }

    proptest! {
        #[test]
        fn retained_count_nonincreasing_in_theta(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut prev = usize::MAX;
            for i in 0..=100 {
                let kept = prune_quality(&q, i as f64 / 100.0).iter().filter(|&&b| b).count();
                prop_assert!(kept <= prev);
                prev = kept;
            }
        }
    }
}
