//! One-dimensional Gaussian-process Bayesian optimization on `[0, 1]`.
//!
//! Matérn 5/2 surrogate, expected-improvement acquisition maximized on a
//! fixed 1001-point grid, hyperparameters picked by marginal likelihood over
//! a small log grid. Everything is deterministic given the seed.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;
const JITTERS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];
pub const GRID_POINTS: usize = 1001;
const INITIAL_DESIGN: [usize; 5] = [0, 250, 500, 750, 1000];
const LENGTHSCALES: [f64; 7] = [0.02, 0.05, 0.1, 0.2, 0.35, 0.6, 1.0];
const SIGNAL_VARIANCES: [f64; 3] = [0.3, 1.0, 3.0];
const NOISE_VARIANCE: f64 = 1e-6;

pub fn matern52(x: f64, y: f64, lengthscale: f64, signal_variance: f64) -> f64 {
    let s = SQRT5 * (x - y).abs() / lengthscale;
    signal_variance * (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub inputs: Vec<f64>,
    pub values: Vec<f64>,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

/// A factorized GP ready for repeated posterior queries.
#[derive(Debug, Clone)]
pub struct FittedGp<'a> {
    model: &'a GpModel,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    weights: DVector<f64>,
}

impl GpModel {
    pub fn kernel_matrix(&self) -> DMatrix<f64> {
        let n = self.inputs.len();
        DMatrix::from_fn(n, n, |i, j| {
            matern52(self.inputs[i], self.inputs[j], self.lengthscale, self.signal_variance)
        })
    }

    /// Cholesky-factorizes `K + noise I`, adding escalating jitter on failure.
    pub fn fit(&self) -> Result<FittedGp<'_>> {
        if self.inputs.is_empty() || self.inputs.len() != self.values.len() {
            return Err(Error::arg(format!(
                "GP needs aligned, nonempty observations ({} inputs, {} values)",
                self.inputs.len(),
                self.values.len()
            )));
        }
        let base = self.kernel_matrix();
        let n = self.inputs.len();
        for jitter in JITTERS {
            let k = &base + DMatrix::identity(n, n) * (self.noise_variance + jitter);
            if let Some(chol) = k.cholesky() {
                let weights = chol.solve(&DVector::from_column_slice(&self.values));
                return Ok(FittedGp {
                    model: self,
                    chol,
                    weights,
                });
            }
        }
        Err(Error::Numerical(format!(
            "kernel matrix not positive definite after jitter {}",
            JITTERS[JITTERS.len() - 1]
        )))
    }
}

impl FittedGp<'_> {
    /// Posterior mean and variance at `x` (zero prior mean).
    pub fn predict(&self, x: f64) -> (f64, f64) {
        let m = self.model;
        let kx = DVector::from_iterator(
            m.inputs.len(),
            m.inputs.iter().map(|&xi| matern52(x, xi, m.lengthscale, m.signal_variance)),
        );
        let mean = kx.dot(&self.weights);
        let v = self.chol.l().solve_lower_triangular(&kx).expect("factor has a nonzero diagonal");
        let var = (m.signal_variance - v.dot(&v)).max(0.0);
        (mean, var)
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let y = DVector::from_column_slice(&self.model.values);
        let n = y.len() as f64;
        let log_det: f64 = self.chol.l().diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * y.dot(&self.weights) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

pub fn gp_posterior(model: &GpModel, x: f64) -> Result<(f64, f64)> {
    Ok(model.fit()?.predict(x))
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected improvement over `best` for maximization.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sd = variance.max(0.0).sqrt();
    let gap = mean - best;
    if sd == 0.0 {
        return gap.max(0.0);
    }
    let z = gap / sd;
    (gap * std_normal_cdf(z) + sd * std_normal_pdf(z)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub theta: f64,
    pub j: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesOptResult {
    pub theta: f64,
    pub value: f64,
    pub trace: Vec<TraceRecord>,
}

fn grid_point(i: usize) -> f64 {
    i as f64 / (GRID_POINTS - 1) as f64
}

/// Maximizes `objective` over `[0, 1]` with `budget` evaluations.
///
/// Evaluations are restricted to the 1001-point grid and cached, so no point
/// is evaluated twice. Returns the best point actually evaluated.
pub fn bayes_opt<F>(mut objective: F, budget: usize, seed: u64) -> Result<BayesOptResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    if budget < INITIAL_DESIGN.len() {
        return Err(Error::arg(format!("bayes_opt budget must be >= 5, got {budget}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: Vec<Option<f64>> = vec![None; GRID_POINTS];
    let mut trace = Vec::with_capacity(budget);

    let mut evaluate = |i: usize, cache: &mut Vec<Option<f64>>, trace: &mut Vec<TraceRecord>| -> Result<()> {
        let theta = grid_point(i);
        let j = objective(theta).map_err(|e| Error::Objective {
            theta,
            message: e.to_string(),
        })?;
        if !j.is_finite() {
            return Err(Error::Objective {
                theta,
                message: format!("non-finite objective value {j}"),
            });
        }
        cache[i] = Some(j);
        trace.push(TraceRecord {
            iteration: trace.len(),
            theta,
            j,
        });
        Ok(())
    };

    for i in INITIAL_DESIGN {
        evaluate(i, &mut cache, &mut trace)?;
    }

    while trace.len() < budget.min(GRID_POINTS) {
        let inputs: Vec<f64> = trace.iter().map(|t| t.theta).collect();
        let raw: Vec<f64> = trace.iter().map(|t| t.j).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
        let scale = if sd > 0.0 { sd } else { 1.0 };
        let values: Vec<f64> = raw.iter().map(|v| (v - mean) / scale).collect();
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        let mut chosen: Option<(GpModel, f64)> = None;
        for &lengthscale in &LENGTHSCALES {
            for &signal_variance in &SIGNAL_VARIANCES {
                let model = GpModel {
                    inputs: inputs.clone(),
                    values: values.clone(),
                    lengthscale,
                    signal_variance,
                    noise_variance: NOISE_VARIANCE,
                };
                let Ok(fitted) = model.fit() else { continue };
                let lml = fitted.log_marginal_likelihood();
                if chosen.as_ref().is_none_or(|(_, b)| lml > *b) {
                    chosen = Some((model, lml));
                }
            }
        }
        let (model, _) = chosen.ok_or_else(|| Error::Numerical("no GP hyperparameters factorize".into()))?;
        let fitted = model.fit()?;

        let mut top = f64::NEG_INFINITY;
        let mut ties: Vec<usize> = Vec::new();
        for (i, slot) in cache.iter().enumerate() {
            if slot.is_some() {
                continue;
            }
            let (m, v) = fitted.predict(grid_point(i));
            let ei = expected_improvement(m, v, best);
            if ei > top {
                top = ei;
                ties.clear();
                ties.push(i);
            } else if ei == top {
                ties.push(i);
            }
        }
        let Some(&next) = ties.choose(&mut rng) else { break };
        evaluate(next, &mut cache, &mut trace)?;
    }

    let best = trace
        .iter()
        .fold(None::<&TraceRecord>, |acc, t| match acc {
            Some(b) if b.j >= t.j => Some(b),
            _ => Some(t),
        })
        .expect("initial design was evaluated");
    Ok(BayesOptResult {
        theta: best.theta,
        value: best.j,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Dense Gaussian elimination on `K + noise I` without any factorization
    /// reuse; independent of the Cholesky path.
    fn dense_posterior(model: &GpModel, x: f64) -> (f64, f64) {
        let n = model.inputs.len();
        let mut a = vec![vec![0.0; n + 2]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = matern52(model.inputs[i], model.inputs[j], model.lengthscale, model.signal_variance);
            }
            a[i][i] += model.noise_variance + 1e-10;
            a[i][n] = model.values[i];
            a[i][n + 1] = matern52(x, model.inputs[i], model.lengthscale, model.signal_variance);
        }
        for p in 0..n {
            let piv = (p..n).max_by(|&u, &v| a[u][p].abs().total_cmp(&a[v][p].abs())).unwrap();
            a.swap(p, piv);
            for r in 0..n {
                if r != p {
                    let f = a[r][p] / a[p][p];
                    for c in p..n + 2 {
                        a[r][c] -= f * a[p][c];
                    }
                }
            }
        }
        let mut mean = 0.0;
        let mut quad = 0.0;
        for i in 0..n {
            let alpha = a[i][n] / a[i][i];
            let kinv_kx = a[i][n + 1] / a[i][i];
            let kx = matern52(x, model.inputs[i], model.lengthscale, model.signal_variance);
            mean += kx * alpha;
            quad += kx * kinv_kx;
        }
        (mean, (model.signal_variance - quad).max(0.0))
    }

    #[test]
    fn kernel_reference_values() {
        assert_eq!(matern52(0.3, 0.3, 0.2, 2.5), 2.5);
        assert!(matern52(0.0, 100.0, 1.0, 1.0) < 1e-30);
        // (1 + sqrt5 + 5/3) * exp(-sqrt5), evaluated independently
        let want = (1.0 + 5f64.sqrt() + 5.0 / 3.0) * (-(5f64.sqrt())).exp();
        assert!((want - 0.523_994_3).abs() < 1e-6);
        assert!((matern52(0.0, 0.4, 0.4, 1.0) - want).abs() < 1e-15);
    }

    #[test]
    fn posterior_interpolates_and_reverts() {
        let model = GpModel {
            inputs: vec![0.1, 0.5, 0.9],
            values: vec![1.0, -2.0, 0.5],
            lengthscale: 0.3,
            signal_variance: 1.0,
            noise_variance: 0.0,
        };
        let (m, v) = gp_posterior(&model, 0.5).unwrap();
        assert!((m + 2.0).abs() < 1e-8);
        assert!(v <= 1e-8);

        let far = GpModel {
            inputs: vec![0.0],
            values: vec![3.0],
            lengthscale: 0.01,
            signal_variance: 2.0,
            noise_variance: 0.0,
        };
        let (m, v) = gp_posterior(&far, 1.0).unwrap();
        assert!(m.abs() < 1e-12);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let n = rng.random_range(2..12);
            let inputs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let model = GpModel {
                inputs,
                values,
                lengthscale: rng.random_range(0.05..0.5),
                signal_variance: rng.random_range(0.5..2.0),
                noise_variance: 1e-4,
            };
            let fitted = model.fit().unwrap();
            for k in 0..10 {
                let x = k as f64 / 9.0;
                let (m, v) = fitted.predict(x);
                let (mo, vo) = dense_posterior(&model, x);
                assert!((m - mo).abs() <= 1e-8 && (v - vo).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn kernel_matrices_factorize() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let mut inputs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            inputs.sort_by(f64::total_cmp);
            inputs.dedup();
            let model = GpModel {
                values: vec![0.0; inputs.len()],
                inputs,
                lengthscale: rng.random_range(0.02..1.0),
                signal_variance: 1.0,
                noise_variance: 0.0,
            };
            let k = model.kernel_matrix();
            assert_eq!(k, k.transpose());
            assert!(model.fit().is_ok());
        }
    }

    #[test]
    fn ei_reference_values() {
        assert_eq!(expected_improvement(1.0, 0.0, 1.0), 0.0);
        assert_eq!(expected_improvement(2.0, 0.0, 1.0), 1.0);
        let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((expected_improvement(0.0, 1.0, 0.0) - phi0).abs() < 1e-15);
        assert!((phi0 - 0.398_94).abs() < 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let ei = expected_improvement(
                rng.random_range(-5.0..5.0),
                rng.random_range(0.0..4.0),
                rng.random_range(-5.0..5.0),
            );
            assert!(ei >= 0.0);
        }
    }

    #[test]
    fn finds_quadratic_peak() {
        let r = bayes_opt(|t| Ok(-(t - 0.3) * (t - 0.3)), 25, 1).unwrap();
        assert!((r.theta - 0.3).abs() < 0.05, "{}", r.theta);
        let max_seen = r.trace.iter().map(|t| t.j).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.value, max_seen);
        assert_eq!(r.trace.len(), 25);
    }

    #[test]
    fn constant_objective_is_deterministic() {
        let a = bayes_opt(|_| Ok(4.0), 12, 9).unwrap();
        let b = bayes_opt(|_| Ok(4.0), 12, 9).unwrap();
        assert_eq!(a.value, 4.0);
        assert_eq!(a.trace, b.trace);
        let mut seen: Vec<f64> = a.trace.iter().map(|t| t.theta).collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn objective_error_carries_theta() {
        let err = bayes_opt(|t| if t > 0.6 { Err(Error::arg("boom")) } else { Ok(t) }, 10, 0).unwrap_err();
        match err {
            Error::Objective { theta, .. } => assert_eq!(theta, 0.75),
            other => panic!("unexpected {other:?}"),
        }
        assert!(bayes_opt(|t| Ok(t), 4, 0).is_err());
    }
}
