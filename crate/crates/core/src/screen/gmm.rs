//! Two-component Gaussian mixture over 3-dimensional window features.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ScreenConfig, WindowFeatures};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: [f64; 2],
    pub means: [[f64; 3]; 2],
    /// Row-major 3x3 covariance per component.
    pub covariances: [[[f64; 3]; 3]; 2],
    /// Index (0 or 1) of the high-quality component.
    pub hq_index: usize,
}

/// Result of an EM run. `objective` holds the regularized log-likelihood
/// after every iteration; it never decreases.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    pub objective: Vec<f64>,
    pub converged: bool,
}

#[derive(Clone, Copy)]
struct Component {
    mean: Vector3<f64>,
    cov: Matrix3<f64>,
}

fn to_matrix(c: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| c[i][j])
}

fn from_matrix(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    out
}

/// Log density of `x` under `N(mean, cov)`.
fn log_normal(x: &Vector3<f64>, mean: &Vector3<f64>, cov: &Matrix3<f64>) -> Result<f64> {
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
    let diff = x - mean;
    let z = chol.l().solve_lower_triangular(&diff).expect("cholesky diagonal is positive");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (3.0 * LN_2PI + log_det + z.dot(&z)))
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl GmmModel {
    fn component(&self, m: usize) -> Component {
        Component {
            mean: Vector3::from(self.means[m]),
            cov: to_matrix(&self.covariances[m]),
        }
    }

    /// `ln(pi_m N(f | mu_m, Sigma_m))` for both components.
    pub fn log_joint(&self, f: &WindowFeatures) -> Result<[f64; 2]> {
        let x = Vector3::from(f.f);
        let mut out = [0.0; 2];
        for (m, o) in out.iter_mut().enumerate() {
            let c = self.component(m);
            *o = self.weights[m].ln() + log_normal(&x, &c.mean, &c.cov)?;
        }
        Ok(out)
    }

    /// Mixture density at `f`.
    pub fn density(&self, f: &WindowFeatures) -> Result<f64> {
        let [a, b] = self.log_joint(f)?;
        Ok(log_sum_exp(a, b).exp())
    }

    pub fn validate(&self) -> Result<()> {
        if (self.weights[0] + self.weights[1] - 1.0).abs() > 1e-12 || self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::arg(format!("invalid mixture weights {:?}", self.weights)));
        }
        if self.hq_index > 1 {
            return Err(Error::arg(format!("hq_index must be 0 or 1, got {}", self.hq_index)));
        }
        for m in 0..2 {
            if to_matrix(&self.covariances[m]).cholesky().is_none() {
                return Err(Error::arg(format!("covariance {m} is not positive definite")));
            }
        }
        Ok(())
    }
}

/// Posterior probability that `f` belongs to the high-quality component,
/// computed from log-density differences.
pub fn posterior_hq(f: &WindowFeatures, model: &GmmModel) -> Result<f64> {
    let lj = model.log_joint(f)?;
    let hq = lj[model.hq_index];
    let other = lj[1 - model.hq_index];
    // 1 / (1 + exp(other - hq))
    let d = other - hq;
    Ok(if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    })
}

/// Fits the mixture by expectation-maximization.
///
/// The second initial center is the point farthest from a seeded random
/// first center. Covariances get a ridge of `cov_reg * N / N_m` each M-step,
/// which is the exact maximizer of the log-likelihood minus
/// `cov_reg * N / 2 * sum_m tr(Sigma_m^-1)`. That penalized objective is
/// what the iteration climbs and what the convergence test watches; every
/// covariance stays at or above `cov_reg * I`.
pub fn fit_gmm(features: &[WindowFeatures], config: &ScreenConfig, seed: u64) -> Result<GmmFit> {
    let n = features.len();
    if n < 4 {
        return Err(Error::arg(format!("GMM needs at least 4 feature vectors, got {n}")));
    }
    let xs: Vec<Vector3<f64>> = features.iter().map(|f| Vector3::from(f.f)).collect();
    let reg = config.cov_reg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let first = rng.random_range(0..n);
    let second = (0..n)
        .max_by(|&a, &b| {
            (xs[a] - xs[first])
                .norm_squared()
                .total_cmp(&(xs[b] - xs[first]).norm_squared())
                .then(b.cmp(&a))
        })
        .expect("n >= 4");
    let mut resp: Vec<[f64; 2]> = xs
        .iter()
        .map(|x| {
            let near_first = (x - xs[first]).norm_squared() <= (x - xs[second]).norm_squared();
            if near_first {
                [1.0, 0.0]
            } else {
                [0.0, 1.0]
            }
        })
        .collect();
    // guarantee both components own at least one point
    resp[first] = [1.0, 0.0];
    resp[second] = [0.0, 1.0];

    let (mut weights, mut comps) = m_step(&xs, &resp, reg);
    let mut objective = Vec::new();
    let mut converged = false;
    for _ in 0..config.em_max_iters.max(1) {
        resp = e_step(&xs, &weights, &comps)?.1;
        let (w, c) = m_step(&xs, &resp, reg);
        weights = w;
        comps = c;
        let value = penalized_objective(&xs, &weights, &comps, reg)?;
        if let Some(&prev) = objective.last() {
            objective.push(value);
            if (value - prev).abs() < config.em_tol {
                converged = true;
                break;
            }
        } else {
            objective.push(value);
        }
    }

    let hq_index = identify_hq(&weights, &comps);
    let model = GmmModel {
        weights,
        means: [comps[0].mean.into(), comps[1].mean.into()],
        covariances: [from_matrix(&comps[0].cov), from_matrix(&comps[1].cov)],
        hq_index,
    };
    Ok(GmmFit {
        model,
        objective,
        converged,
    })
}

/// Lower mean entropy wins; ties go to the heavier component.
fn identify_hq(weights: &[f64; 2], comps: &[Component; 2]) -> usize {
    let (h0, h1) = (comps[0].mean[2], comps[1].mean[2]);
    if h0 < h1 {
        0
    } else if h1 < h0 {
        1
    } else if weights[1] > weights[0] {
        1
    } else {
        0
    }
}

fn e_step(xs: &[Vector3<f64>], weights: &[f64; 2], comps: &[Component; 2]) -> Result<(f64, Vec<[f64; 2]>)> {
    let chols = [chol(&comps[0].cov)?, chol(&comps[1].cov)?];
    let mut ll = 0.0;
    let mut resp = Vec::with_capacity(xs.len());
    for x in xs {
        let a = weights[0].ln() + log_normal_chol(x, &comps[0].mean, &chols[0]);
        let b = weights[1].ln() + log_normal_chol(x, &comps[1].mean, &chols[1]);
        let total = log_sum_exp(a, b);
        ll += total;
        resp.push([(a - total).exp(), (b - total).exp()]);
    }
    Ok((ll, resp))
}

type Chol3 = nalgebra::Cholesky<f64, nalgebra::Const<3>>;

fn chol(cov: &Matrix3<f64>) -> Result<Chol3> {
    cov.cholesky()
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))
}

fn log_normal_chol(x: &Vector3<f64>, mean: &Vector3<f64>, chol: &Chol3) -> f64 {
    let z = chol.l().solve_lower_triangular(&(x - mean)).expect("cholesky diagonal is positive");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (3.0 * LN_2PI + log_det + z.dot(&z))
}

fn m_step(xs: &[Vector3<f64>], resp: &[[f64; 2]], reg: f64) -> ([f64; 2], [Component; 2]) {
    let n = xs.len() as f64;
    // floor keeps both weights strictly positive
    let nk: [f64; 2] = [0, 1].map(|m| resp.iter().map(|r| r[m]).sum::<f64>().max(1e-10));
    let comps = [0, 1].map(|m| {
        let mean = xs
            .iter()
            .zip(resp)
            .fold(Vector3::zeros(), |acc: Vector3<f64>, (x, r)| acc + x * r[m])
            / nk[m];
        let scatter = xs.iter().zip(resp).fold(Matrix3::zeros(), |acc: Matrix3<f64>, (x, r)| {
            let d = x - mean;
            acc + d * d.transpose() * r[m]
        });
        let mut cov = scatter / nk[m] + Matrix3::identity() * (reg * n / nk[m]);
        // symmetrize round-off
        cov = (cov + cov.transpose()) * 0.5;
        Component { mean, cov }
    });
    let total = nk[0] + nk[1];
    ([nk[0] / total, nk[1] / total], comps)
}

fn penalized_objective(xs: &[Vector3<f64>], weights: &[f64; 2], comps: &[Component; 2], reg: f64) -> Result<f64> {
    let (ll, _) = e_step(xs, weights, comps)?;
    let n = xs.len() as f64;
    let mut penalty = 0.0;
    for c in comps {
        let inv = chol(&c.cov)?.inverse();
        penalty += inv.trace();
    }
    Ok(ll - 0.5 * reg * n * penalty)
}
