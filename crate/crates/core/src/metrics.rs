//! Accuracy metrics, retention bookkeeping and a linear separability probe.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check_aligned(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::arg("metric over an empty set"));
    }
    if preds.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_aligned(preds, labels)?;
    let sse: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// Asymmetric exponential score: late predictions (`pred > label`) are
/// penalized with scale 10, early ones with scale 13.
pub fn nasa_score(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_aligned(preds, labels)?;
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let e = p - y;
            if e < 0.0 {
                (-e / 13.0).exp() - 1.0
            } else {
                (e / 10.0).exp() - 1.0
            }
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub nasa_score: f64,
    pub n: usize,
    pub retention_fraction: f64,
    pub separability_accuracy: Option<f64>,
}

/// Fate of one window in the pruning pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowFate {
    Kept,
    RemovedCausal,
    RemovedQuality,
    /// Removed by something other than the two stages (e.g. stride subsampling).
    RemovedOther,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionSummary {
    pub full: usize,
    pub retained: usize,
    pub fraction: f64,
    pub removed_causal: usize,
    pub removed_quality: usize,
    pub removed_other: usize,
}

pub fn retention_stats(fates: &[WindowFate]) -> RetentionSummary {
    let count = |f: WindowFate| fates.iter().filter(|&&x| x == f).count();
    let retained = count(WindowFate::Kept);
    RetentionSummary {
        full: fates.len(),
        retained,
        fraction: if fates.is_empty() {
            0.0
        } else {
            retained as f64 / fates.len() as f64
        },
        removed_causal: count(WindowFate::RemovedCausal),
        removed_quality: count(WindowFate::RemovedQuality),
        removed_other: count(WindowFate::RemovedOther),
    }
}

/// Projects rows onto the top-`k` principal components of their covariance.
pub fn pca_project(points: &[Vec<f64>], k: usize) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]) / n as f64;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let comps: Vec<Vec<f64>> = order
        .iter()
        .take(k.min(d))
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            // deterministic sign: largest-magnitude entry positive
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(points
        .iter()
        .map(|p| {
            let mut out: Vec<f64> = comps
                .iter()
                .map(|c| c.iter().zip(p).zip(&mean).map(|((w, x), m)| w * (x - m)).sum())
                .collect();
            out.resize(k, 0.0);
            out
        })
        .collect())
}

/// One scatter point for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub pc1: f64,
    pub pc2: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Separability {
    /// Balanced training accuracy of the linear probe.
    pub accuracy: f64,
    pub scatter: Vec<ScatterPoint>,
}

const PERCEPTRON_EPOCHS: usize = 50;

/// Balanced accuracy of an averaged, class-weighted perceptron trained on
/// the 2-D PCA projection of the pooled features. `None` when either set has
/// fewer than two points.
pub fn separability(retained: &[Vec<f64>], discarded: &[Vec<f64>], seed: u64) -> Result<Option<Separability>> {
    if retained.len() < 2 || discarded.len() < 2 {
        return Ok(None);
    }
    // canonical order so the result does not depend on which set came first
    let mut pooled: Vec<(&Vec<f64>, bool)> = retained
        .iter()
        .map(|p| (p, true))
        .chain(discarded.iter().map(|p| (p, false)))
        .collect();
    pooled.sort_by(|a, b| {
        a.0.iter()
            .zip(b.0.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let pts: Vec<Vec<f64>> = pooled.iter().map(|(p, _)| (*p).clone()).collect();
    let proj = pca_project(&pts, 2)?;
    // standardize each axis
    let mut z = proj.clone();
    for c in 0..2 {
        let n = z.len() as f64;
        let m = z.iter().map(|r| r[c]).sum::<f64>() / n;
        let s = (z.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / n).sqrt();
        for r in &mut z {
            r[c] = if s > 0.0 { (r[c] - m) / s } else { 0.0 };
        }
    }
    let labels: Vec<f64> = pooled.iter().map(|&(_, r)| if r { 1.0 } else { -1.0 }).collect();
    let n_pos = retained.len() as f64;
    let n_neg = discarded.len() as f64;
    let n = n_pos + n_neg;
    let weight = |y: f64| if y > 0.0 { n / (2.0 * n_pos) } else { n / (2.0 * n_neg) };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..z.len()).collect();
    let mut w = [0.0f64; 3];
    let mut avg = [0.0f64; 3];
    let mut steps = 0.0;
    for _ in 0..PERCEPTRON_EPOCHS {
        order.shuffle(&mut rng);
        for &i in &order {
            let y = labels[i];
            let act = w[0] * z[i][0] + w[1] * z[i][1] + w[2];
            if y * act <= 0.0 {
                let k = weight(y) * y;
                w[0] += k * z[i][0];
                w[1] += k * z[i][1];
                w[2] += k;
            }
            for (a, v) in avg.iter_mut().zip(&w) {
                *a += v;
            }
            steps += 1.0;
        }
    }
    avg.iter_mut().for_each(|a| *a /= steps);
    let (mut tp, mut tn) = (0.0, 0.0);
    for (r, &y) in z.iter().zip(&labels) {
        let act = avg[0] * r[0] + avg[1] * r[1] + avg[2];
        if y > 0.0 && act > 0.0 {
            tp += 1.0;
        } else if y < 0.0 && act < 0.0 {
            tn += 1.0;
        }
    }
    let accuracy = 0.5 * (tp / n_pos + tn / n_neg);
    let scatter = proj
        .iter()
        .zip(&pooled)
        .map(|(p, &(_, r))| ScatterPoint {
            pc1: p[0],
            pc2: p[1],
            retained: r,
        })
        .collect();
    Ok(Some(Separability { accuracy, scatter }))
}
