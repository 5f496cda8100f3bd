//! Generalized least squares over the stacked system, its diagonal (WLS)
//! special case and the pooled-MSE variant.
//!
//! The normal equations `W'V^{-1}W beta = W'V^{-1}b` are accumulated study by
//! study in input order. Each block is factored on its own (diagonal blocks
//! are inverted elementwise), so `V` is never formed or inverted as a whole.

use nalgebra::{DMatrix, DVector};

use crate::design::{Mode, StackedSystem};
use crate::error::{Error, Result};
use crate::linalg;

/// Condition numbers of `W'V^{-1}W` above this carry a multicollinearity
/// warning.
pub const CONDITION_WARNING: f64 = 1e8;

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub beta_hat: DVector<f64>,
    pub cov_beta: DMatrix<f64>,
    pub param_labels: Vec<String>,
    /// Catalog index behind each parameter (`None` for moderators).
    pub param_catalog: Vec<Option<usize>>,
    /// Position of the intercept parameter, when one is estimated.
    pub intercept_param: Option<usize>,
    pub mode: Mode,
    pub pooled_mse: Option<f64>,
    pub condition_number: f64,
    /// Stacked residuals `b - W beta_hat`.
    pub residuals: DVector<f64>,
    pub warnings: Vec<String>,
}

impl SynthesisResult {
    pub fn variance(&self, p: usize) -> f64 {
        self.cov_beta[(p, p)]
    }

    pub fn std_error(&self, p: usize) -> f64 {
        self.cov_beta[(p, p)].sqrt()
    }

    /// Correlation matrix of the estimates.
    pub fn correlation(&self) -> DMatrix<f64> {
        let n = self.cov_beta.nrows();
        DMatrix::from_fn(n, n, |i, j| {
            self.cov_beta[(i, j)] / (self.cov_beta[(i, i)] * self.cov_beta[(j, j)]).sqrt()
        })
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.param_labels.iter().position(|l| l == label)
    }
}

/// `V_i^{-1}` applied to a study's design rows and coefficients.
struct WeightedBlock {
    vinv_w: DMatrix<f64>,
    vinv_b: DVector<f64>,
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == 0.0))
}

fn weigh_block(system: &StackedSystem, study: usize) -> Result<WeightedBlock> {
    let block = &system.blocks()[study];
    let w = system.w_block(study);
    let b = system.b_block(study);
    let not_pd = || Error::NotPositiveDefinite {
        study: system.study_ids()[study].clone(),
    };
    if is_diagonal(block) {
        let mut vinv_w = w;
        let mut vinv_b = b;
        for r in 0..block.nrows() {
            let d = block[(r, r)];
            if !(d > 0.0 && d.is_finite()) {
                return Err(not_pd());
            }
            let weight = 1.0 / d;
            vinv_w.row_mut(r).iter_mut().for_each(|v| *v *= weight);
            vinv_b[r] *= weight;
        }
        Ok(WeightedBlock { vinv_w, vinv_b })
    } else {
        let chol = linalg::cholesky(block).ok_or_else(not_pd)?;
        Ok(WeightedBlock {
            vinv_w: chol.solve(&w),
            vinv_b: chol.solve(&b),
        })
    }
}

/// Accumulates `W'V^{-1}W` and `W'V^{-1}b` in a fixed order: studies in input
/// order, rows within each study top to bottom.
fn normal_equations(system: &StackedSystem) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let q = system.param_count();
    let mut normal = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    for study in 0..system.study_count() {
        let weighted = weigh_block(system, study)?;
        let w = system.w_block(study);
        for a in 0..q {
            for r in 0..w.nrows() {
                let wa = w[(r, a)];
                if wa == 0.0 {
                    continue;
                }
                rhs[a] += wa * weighted.vinv_b[r];
                for c in 0..q {
                    normal[(a, c)] += wa * weighted.vinv_w[(r, c)];
                }
            }
        }
    }
    Ok((linalg::symmetrize(&normal), rhs))
}

struct Solution {
    beta: DVector<f64>,
    inverse: DMatrix<f64>,
    condition_number: f64,
}

fn solve_normal(system: &StackedSystem, normal: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<Solution> {
    let singular = || {
        let dependent = linalg::dependent_columns(normal, linalg::RANK_TOL);
        let names: Vec<&str> = dependent.iter().map(|&j| system.param_labels()[j].as_str()).collect();
        Error::Singular(if names.is_empty() {
            "W'V^-1W is not positive-definite".to_string()
        } else {
            format!("W'V^-1W is singular in parameters {}", names.join(", "))
        })
    };
    let condition_number = linalg::condition_number(normal);
    if is_diagonal(normal) {
        // Closed form keeps the diagonal case identical to per-coordinate
        // inverse-variance pooling.
        let diag = normal.diagonal();
        if diag.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(singular());
        }
        return Ok(Solution {
            beta: rhs.zip_map(&diag, |r, d| r / d),
            inverse: DMatrix::from_diagonal(&diag.map(|d| 1.0 / d)),
            condition_number,
        });
    }
    let chol = linalg::cholesky(normal).ok_or_else(singular)?;
    Ok(Solution {
        beta: chol.solve(rhs),
        inverse: linalg::symmetrize(&chol.inverse()),
        condition_number,
    })
}

fn residuals(system: &StackedSystem, beta: &DVector<f64>) -> DVector<f64> {
    let w = system.w();
    DVector::from_fn(system.row_count(), |r, _| {
        let mut fitted = 0.0;
        for c in 0..w.ncols() {
            fitted += w[(r, c)] * beta[c];
        }
        system.b()[r] - fitted
    })
}

fn assemble(system: &StackedSystem, sol: Solution, cov_beta: DMatrix<f64>, pooled_mse: Option<f64>) -> SynthesisResult {
    let mut warnings = system.warnings().to_vec();
    if sol.condition_number > CONDITION_WARNING {
        warnings.push(format!(
            "condition number of W'V^-1W is {:.3e}; estimates may suffer from multicollinearity",
            sol.condition_number
        ));
    }
    SynthesisResult {
        residuals: residuals(system, &sol.beta),
        beta_hat: sol.beta,
        cov_beta,
        param_labels: system.param_labels().to_vec(),
        param_catalog: system.param_catalog().to_vec(),
        intercept_param: system.intercept_param(),
        mode: system.mode(),
        pooled_mse,
        condition_number: sol.condition_number,
        warnings,
    }
}

/// GLS estimate `(W'V^{-1}W)^{-1} W'V^{-1} b` with covariance
/// `(W'V^{-1}W)^{-1}`.
pub fn gls_estimate(system: &StackedSystem) -> Result<SynthesisResult> {
    if system.mode() == Mode::PooledMse {
        return Err(Error::Domain(
            "system holds (X'X)^-1 blocks; use pooled_gls_estimate".into(),
        ));
    }
    let (normal, rhs) = normal_equations(system)?;
    let sol = solve_normal(system, &normal, &rhs)?;
    let cov = sol.inverse.clone();
    Ok(assemble(system, sol, cov, None))
}

/// Estimate from `(X_i'X_i)^{-1}` blocks; the covariance is
/// `(W'X*^{-1}W)^{-1}` scaled by the pooled MSE.
pub fn pooled_gls_estimate(system: &StackedSystem, s_star_sq: f64) -> Result<SynthesisResult> {
    if system.mode() != Mode::PooledMse {
        return Err(Error::Domain("pooled estimation needs a system built in pooled-MSE mode".into()));
    }
    if !(s_star_sq > 0.0 && s_star_sq.is_finite()) {
        return Err(Error::Domain(format!("pooled MSE must be positive, got {s_star_sq}")));
    }
    let (normal, rhs) = normal_equations(system)?;
    let sol = solve_normal(system, &normal, &rhs)?;
    let cov = &sol.inverse * s_star_sq;
    Ok(assemble(system, sol, cov, Some(s_star_sq)))
}

/// [`pooled_gls_estimate`] with the MSE pooled from the studies themselves.
pub fn pooled_gls_estimate_from_studies(system: &StackedSystem) -> Result<SynthesisResult> {
    let mses: Vec<f64> = system
        .mses()
        .iter()
        .zip(system.study_ids())
        .map(|(m, id)| m.ok_or_else(|| Error::study(id, "MSE required for pooling")))
        .collect::<Result<_>>()?;
    let s_star_sq = pooled_mse(system.dfes(), &mses)?;
    pooled_gls_estimate(system, s_star_sq)
}

/// Inverse-variance weighted mean of one coefficient across studies and its
/// variance.
pub fn wls_univariate(slopes: &[f64], variances: &[f64]) -> Result<(f64, f64)> {
    if slopes.is_empty() {
        return Err(Error::Domain("at least one slope required".into()));
    }
    if slopes.len() != variances.len() {
        return Err(Error::Domain(format!(
            "{} slopes but {} variances",
            slopes.len(),
            variances.len()
        )));
    }
    let mut weighted = 0.0;
    let mut total = 0.0;
    for (&b, &v) in slopes.iter().zip(variances) {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("variance must be positive, got {v}")));
        }
        let w = 1.0 / v;
        weighted += w * b;
        total += w;
    }
    Ok((weighted / total, 1.0 / total))
}

/// Error-df weighted mean of study MSEs.
pub fn pooled_mse(dfes: &[usize], mses: &[f64]) -> Result<f64> {
    if dfes.len() != mses.len() {
        return Err(Error::Domain(format!("{} dfe values but {} MSEs", dfes.len(), mses.len())));
    }
    if dfes.is_empty() {
        return Err(Error::Domain("at least one study required".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&df, &s2) in dfes.iter().zip(mses) {
        if df < 1 {
            return Err(Error::Domain("error df must be at least 1".into()));
        }
        if !(s2 > 0.0 && s2.is_finite()) {
            return Err(Error::Domain(format!("MSE must be positive, got {s2}")));
        }
        num += df as f64 * s2;
        den += df as f64;
    }
    Ok(num / den)
}
