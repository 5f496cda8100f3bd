//! Significance tests, intervals, homogeneity statistics and residual
//! variance checks.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::design::{Mode, StackedSystem};
use crate::distributions::{chi_sq_sf, normal_quantile, normal_two_sided_p};
use crate::error::{Error, Result};
use crate::estimators::{gls_estimate, pooled_gls_estimate, SynthesisResult};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Z,
    QE,
    QB,
    CochranC,
    Fmax,
    Levene,
}

/// A test statistic with its reference distribution's degrees of freedom.
///
/// `df` is absent for Z and for the statistic-only variance checks; `df2` is
/// the denominator df of F tests. `p_value` is absent when no reference
/// distribution is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub df: Option<usize>,
    pub df2: Option<usize>,
    pub p_value: Option<f64>,
}

impl TestResult {
    fn chi_squared(kind: TestKind, statistic: f64, df: usize) -> Result<Self> {
        let p = if df == 0 {
            // saturated: the statistic is identically zero
            1.0
        } else {
            chi_sq_sf(statistic.max(0.0), df)?
        };
        Ok(Self {
            kind,
            statistic,
            df: Some(df),
            df2: None,
            p_value: Some(p),
        })
    }
}

/// Two-sided Z test of a single parameter against zero.
pub fn z_test(beta_p: f64, c_pp: f64) -> Result<TestResult> {
    if !(c_pp > 0.0 && c_pp.is_finite()) {
        return Err(Error::Domain(format!("variance must be positive, got {c_pp}")));
    }
    let z = beta_p / c_pp.sqrt();
    Ok(TestResult {
        kind: TestKind::Z,
        statistic: z,
        df: None,
        df2: None,
        p_value: Some(normal_two_sided_p(z)),
    })
}

/// Upper `1 - alpha/2` standard normal critical value.
pub fn critical_z(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} outside (0, 1)")));
    }
    normal_quantile(1.0 - alpha / 2.0)
}

/// Normal-theory `1 - alpha` interval `beta_p ± z * sqrt(c_pp)`.
pub fn confidence_interval(beta_p: f64, c_pp: f64, alpha: f64) -> Result<(f64, f64)> {
    let z = critical_z(alpha)?;
    if !(c_pp > 0.0 && c_pp.is_finite()) {
        return Err(Error::Domain(format!("variance must be positive, got {c_pp}")));
    }
    let half = z * c_pp.sqrt();
    Ok((beta_p - half, beta_p + half))
}

/// Q_E homogeneity statistic together with the system it was computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct Homogeneity {
    pub test: TestResult,
    /// False when slopes-only was requested but the system carried no
    /// intercept rows, so the ordinary statistic was returned.
    pub slopes_only_applied: bool,
}

/// Weighted residual sum of squares `(b - W beta)' V^{-1} (b - W beta)`.
fn weighted_rss(system: &StackedSystem, residuals: &DVector<f64>, scale: f64) -> Result<f64> {
    let mut total = 0.0;
    for study in 0..system.study_count() {
        let range = system.study_range(study);
        let e = residuals.rows_range(range).into_owned();
        let block = &system.blocks()[study] * scale;
        let chol = linalg::cholesky(&block).ok_or_else(|| Error::NotPositiveDefinite {
            study: system.study_ids()[study].clone(),
        })?;
        total += e.dot(&chol.solve(&e));
    }
    Ok(total)
}

fn estimate(system: &StackedSystem, pooled_mse: Option<f64>) -> Result<SynthesisResult> {
    match system.mode() {
        Mode::PooledMse => pooled_gls_estimate(
            system,
            pooled_mse.ok_or_else(|| Error::Domain("pooled result without a pooled MSE".into()))?,
        ),
        _ => gls_estimate(system),
    }
}

/// Q_E homogeneity test.
///
/// The reference df is rows(W) - cols(W), which reduces to (k - 1)(P + 1)
/// for full models without moderators and (k - 1)P for the slopes-only
/// variant. With `slopes_only` set on a system that stacks intercepts, the
/// intercept rows are projected out and the parameters re-estimated before
/// the statistic is formed. In pooled-MSE mode the weight blocks are
/// `(X_i'X_i)^{-1}` scaled by the pooled MSE.
pub fn q_e(system: &StackedSystem, result: &SynthesisResult, slopes_only: bool) -> Result<Homogeneity> {
    if result.beta_hat.len() != system.param_count() || result.residuals.len() != system.row_count() {
        return Err(Error::Domain("result was not produced from this system".into()));
    }
    let scale = match system.mode() {
        Mode::PooledMse => result
            .pooled_mse
            .ok_or_else(|| Error::Domain("pooled result without a pooled MSE".into()))?,
        _ => 1.0,
    };
    let (stat, df, applied) = if slopes_only && system.has_intercept_rows() {
        let projected = system.without_intercept()?;
        let refit = estimate(&projected, result.pooled_mse)?;
        let stat = weighted_rss(&projected, &refit.residuals, scale)?;
        (stat, projected.row_count() - projected.param_count(), true)
    } else {
        let stat = weighted_rss(system, &result.residuals, scale)?;
        (stat, system.row_count() - system.param_count(), slopes_only && system.is_slopes_only())
    };
    Ok(Homogeneity {
        test: TestResult::chi_squared(TestKind::QE, stat, df)?,
        slopes_only_applied: applied,
    })
}

/// Q_B test that the synthesized parameters are jointly zero,
/// `beta' Cov(beta)^{-1} beta`. With `slopes_only`, the intercept parameter
/// (if any) is left out.
pub fn q_b(result: &SynthesisResult, slopes_only: bool) -> Result<TestResult> {
    let skip = if slopes_only { result.intercept_param } else { None };
    let keep: Vec<usize> = (0..result.beta_hat.len()).filter(|&j| Some(j) != skip).collect();
    if keep.is_empty() {
        return Err(Error::Domain("no parameters left to test".into()));
    }
    let beta = DVector::from_iterator(keep.len(), keep.iter().map(|&j| result.beta_hat[j]));
    let cov = result.cov_beta.select_rows(&keep).select_columns(&keep);
    let chol = linalg::cholesky(&cov)
        .ok_or_else(|| Error::Singular("covariance of the synthesized parameters".into()))?;
    let stat = beta.dot(&chol.solve(&beta));
    TestResult::chi_squared(TestKind::QB, stat, keep.len())
}

fn check_mses(mses: &[f64]) -> Result<()> {
    if mses.len() < 2 {
        return Err(Error::Domain("variance checks need at least two studies".into()));
    }
    if mses.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
        return Err(Error::Domain("MSEs must be positive".into()));
    }
    Ok(())
}

/// Cochran's C: largest MSE over the sum of MSEs. Statistic only.
pub fn cochran_c(mses: &[f64]) -> Result<TestResult> {
    check_mses(mses)?;
    let max = mses.iter().copied().fold(f64::MIN, f64::max);
    let sum: f64 = mses.iter().sum();
    Ok(TestResult {
        kind: TestKind::CochranC,
        statistic: max / sum,
        df: None,
        df2: None,
        p_value: None,
    })
}

/// Hartley's F_max: largest over smallest MSE. Statistic only.
pub fn f_max(mses: &[f64]) -> Result<TestResult> {
    check_mses(mses)?;
    let max = mses.iter().copied().fold(f64::MIN, f64::max);
    let min = mses.iter().copied().fold(f64::MAX, f64::min);
    Ok(TestResult {
        kind: TestKind::Fmax,
        statistic: max / min,
        df: None,
        df2: None,
        p_value: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_system, BuildOptions};
    use crate::model::{CovSpec, PredictorCatalog, StudyRegression};
    use nalgebra::DMatrix;

    fn result_with(beta: &[f64], cov: DMatrix<f64>) -> SynthesisResult {
        SynthesisResult {
            beta_hat: DVector::from_column_slice(beta),
            cov_beta: cov,
            param_labels: (0..beta.len()).map(|i| format!("p{i}")).collect(),
            param_catalog: (0..beta.len()).map(Some).collect(),
            intercept_param: None,
            mode: Mode::Gls,
            pooled_mse: None,
            condition_number: 1.0,
            residuals: DVector::zeros(0),
            warnings: Vec::new(),
        }
    }

    #[test]
    fn z_values() {
        let t = z_test(0.0, 1.0).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert!((t.p_value.unwrap() - 1.0).abs() < 1e-15);
        let t = z_test(1.96, 1.0).unwrap();
        assert!((t.p_value.unwrap() - 0.05).abs() < 1e-4);
        assert_eq!(z_test(-3.0, 4.0).unwrap().statistic, -1.5);
        assert!(z_test(1.0, 0.0).is_err());
    }

    #[test]
    fn interval_values() {
        let (lo, hi) = confidence_interval(0.0, 1.0, 0.05).unwrap();
        assert!((lo + 1.960).abs() < 1e-3 && (hi - 1.960).abs() < 1e-3);
        let (lo, hi) = confidence_interval(0.7, 1e-20, 0.05).unwrap();
        assert!((hi - lo) < 1e-9 && lo < hi);
        assert!(confidence_interval(0.0, 1.0, 1.0).is_err());
        assert!(confidence_interval(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn interval_and_z_agree() {
        let alpha = 0.05;
        for &(b, c) in &[(1.0, 0.25), (0.3, 0.1), (-2.5, 1.7), (0.0, 3.0), (1.9599, 1.0), (1.9601, 1.0)] {
            let (lo, hi) = confidence_interval(b, c, alpha).unwrap();
            let excludes = lo > 0.0 || hi < 0.0;
            let z = z_test(b, c).unwrap();
            let crit = critical_z(alpha).unwrap();
            assert_eq!(excludes, z.statistic.abs() > crit, "b = {b}, c = {c}");
        }
    }

    fn one_coefficient_system(slopes: &[f64], variances: &[f64]) -> StackedSystem {
        let catalog = PredictorCatalog::without_intercept(["x"]).unwrap();
        let studies: Vec<_> = slopes
            .iter()
            .zip(variances)
            .enumerate()
            .map(|(i, (&b, &v))| {
                StudyRegression::new(i.to_string(), 30, &[(0, b)], CovSpec::StandardErrors(DVector::from_element(1, v.sqrt())))
            })
            .collect();
        build_system(&studies, &catalog, &[], Mode::Gls, BuildOptions::default()).unwrap()
    }

    #[test]
    fn q_e_hand_example() {
        let sys = one_coefficient_system(&[1.0, 3.0], &[1.0, 1.0]);
        let r = gls_estimate(&sys).unwrap();
        assert!((r.beta_hat[0] - 2.0).abs() < 1e-15);
        let q = q_e(&sys, &r, false).unwrap();
        assert!((q.test.statistic - 2.0).abs() < 1e-14);
        assert_eq!(q.test.df, Some(1));
        // slopes-only has nothing to project here
        let q = q_e(&sys, &r, true).unwrap();
        assert!(!q.slopes_only_applied);
    }

    #[test]
    fn q_e_zero_for_identical_and_single_studies() {
        let sys = one_coefficient_system(&[0.4, 0.4, 0.4], &[1.0, 0.2, 3.0]);
        let r = gls_estimate(&sys).unwrap();
        assert!(q_e(&sys, &r, false).unwrap().test.statistic.abs() < 1e-28);
        let sys = one_coefficient_system(&[0.4], &[1.0]);
        let r = gls_estimate(&sys).unwrap();
        let q = q_e(&sys, &r, false).unwrap();
        assert_eq!(q.test.df, Some(0));
        assert_eq!(q.test.statistic, 0.0);
        assert_eq!(q.test.p_value, Some(1.0));
    }

    #[test]
    fn q_b_values() {
        let t = q_b(&result_with(&[0.0, 0.0], DMatrix::identity(2, 2)), false).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.p_value, Some(1.0));
        let t = q_b(&result_with(&[2.0], DMatrix::from_element(1, 1, 4.0)), false).unwrap();
        assert!((t.statistic - 1.0).abs() < 1e-15);
        assert_eq!(t.df, Some(1));
        let t = q_b(&result_with(&[3.0, 4.0], DMatrix::identity(2, 2)), false).unwrap();
        assert!((t.statistic - 25.0).abs() < 1e-13);
        assert_eq!(t.df, Some(2));
        assert!(q_b(&result_with(&[1.0, 1.0], DMatrix::from_element(2, 2, 1.0)), false).is_err());
    }

    #[test]
    fn q_b_slopes_only_drops_intercept() {
        let mut r = result_with(&[10.0, 3.0, 4.0], DMatrix::identity(3, 3));
        r.intercept_param = Some(0);
        let t = q_b(&r, true).unwrap();
        assert!((t.statistic - 25.0).abs() < 1e-13);
        assert_eq!(t.df, Some(2));
    }

    #[test]
    fn variance_checks() {
        let c = cochran_c(&[3.0, 3.0, 3.0, 3.0]).unwrap();
        assert!((c.statistic - 0.25).abs() < 1e-15);
        assert_eq!(f_max(&[3.0, 3.0, 3.0]).unwrap().statistic, 1.0);
        assert!((cochran_c(&[2.0, 8.0]).unwrap().statistic - 0.8).abs() < 1e-15);
        assert_eq!(f_max(&[2.0, 8.0]).unwrap().statistic, 4.0);
        assert!(cochran_c(&[1.0]).is_err());
        assert!(f_max(&[1.0, -1.0]).is_err());
        assert!(f_max(&[2.0, 8.0]).unwrap().p_value.is_none());
    }
}
