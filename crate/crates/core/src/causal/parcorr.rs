//! Partial-correlation conditional-independence test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Outcome of one conditional-independence test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiResult {
    pub rho: f64,
    pub p_value: f64,
    pub cond_size: usize,
}

impl CiResult {
    fn degenerate(cond_size: usize) -> Self {
        CiResult {
            rho: 0.0,
            p_value: 1.0,
            cond_size,
        }
    }
}

// Residual norms below this fraction of the centered norm count as zero.
const RESIDUAL_TOL: f64 = 1e-10;

/// Residuals of each target after least-squares projection onto
/// `[1, z_1, ..., z_k]`. Rank-deficient designs are handled by column
/// pivoting: only the numerically independent part of the basis is used.
fn residualize(targets: [&[f64]; 2], z: &[&[f64]]) -> [DVector<f64>; 2] {
    let n = targets[0].len();
    let mut design = DMatrix::from_element(n, z.len() + 1, 1.0);
    for (k, col) in z.iter().enumerate() {
        design.set_column(k + 1, &DVector::from_column_slice(col));
    }
    let qr = design.col_piv_qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rank = r
        .diagonal()
        .iter()
        .take_while(|v| v.abs() > scale * 1e-12)
        .count();
    let q = qr.q();
    let basis = q.columns(0, rank);
    targets.map(|t| {
        let v = DVector::from_column_slice(t);
        let coef = basis.transpose() * &v;
        v - basis * coef
    })
}

fn centered_norm(x: &[f64]) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt()
}

/// Two-sided p-value of a (partial) correlation via the Fisher z-transform.
pub fn fisher_z_pvalue(rho: f64, n: usize, cond_size: usize) -> f64 {
    let dof = n as f64 - cond_size as f64 - 3.0;
    if dof <= 0.0 {
        return 1.0;
    }
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let z = rho.atanh().abs() * dof.sqrt();
    erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Partial correlation of `x` and `y` given `z`.
///
/// Both variables are regressed on `z` (plus an intercept) and the Pearson
/// correlation of the residuals is returned. If either residual vanishes the
/// test reports `rho = 0, p = 1`.
pub fn parcorr(x: &[f64], y: &[f64], z: &[&[f64]]) -> Result<CiResult> {
    let n = x.len();
    if y.len() != n || z.iter().any(|c| c.len() != n) {
        return Err(Error::arg(format!(
            "parcorr: sequences must share one length (x has {n}, y has {}, z has {:?})",
            y.len(),
            z.iter().map(|c| c.len()).collect::<Vec<_>>()
        )));
    }
    if n < z.len() + 3 {
        return Err(Error::arg(format!(
            "parcorr: {n} samples cannot support a conditioning set of {}",
            z.len()
        )));
    }
    let cond_size = z.len();
    let (xn, yn) = (centered_norm(x), centered_norm(y));
    if xn == 0.0 || yn == 0.0 {
        return Ok(CiResult::degenerate(cond_size));
    }
    let [rx, ry] = residualize([x, y], z);
    let (rxn, ryn) = (rx.norm(), ry.norm());
    if rxn <= RESIDUAL_TOL * xn || ryn <= RESIDUAL_TOL * yn {
        return Ok(CiResult::degenerate(cond_size));
    }
    let rho = (rx.dot(&ry) / (rxn * ryn)).clamp(-1.0, 1.0);
    Ok(CiResult {
        rho,
        p_value: fisher_z_pvalue(rho, n, cond_size),
        cond_size,
    })
}
