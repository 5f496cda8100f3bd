//! Case-level oracle: OLS fits on raw data, the pooled-sample equivalence
//! check, synthetic data generation, Levene's test and Monte Carlo runs.

mod data;
mod montecarlo;
mod ols;

use rand_distr::{ChiSquared, Distribution};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

pub use data::{
    fit_studies, generate, generate_with, replication_rng, split_and_fit, RawDataset, SimConfig, StudyFit,
    REFERENCE_MSES, REFERENCE_SAMPLE_SIZES,
};
pub use montecarlo::{
    run_monte_carlo, CovarianceSource, MethodSummary, MonteCarloConfig, MonteCarloReport, ParamSummary,
};
pub use ols::{ols_fit, OlsFit};

use crate::design::{build_system, BuildOptions, Mode};
use crate::error::{Error, Result};
use crate::estimators::{pooled_gls_estimate, pooled_mse};
use crate::inference::{cochran_c, f_max, TestKind, TestResult};

/// Coefficient tolerance for the pooled-sample equivalence check.
pub const EQUIVALENCE_TOL: f64 = 1e-10;

/// Comparison of the pooled-MSE synthesis with one OLS fit on all cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub studies: usize,
    pub cases: usize,
    pub synthesized: Vec<f64>,
    pub pooled_sample: Vec<f64>,
    /// Largest coefficientwise relative difference.
    pub max_coefficient_discrepancy: f64,
    /// Largest relative difference between the synthesized covariance and
    /// the pooled-sample `(X'X)^{-1}` scaled by the pooled MSE.
    pub max_covariance_discrepancy: f64,
    pub pooled_mse: f64,
    pub full_sample_mse: f64,
    /// Pooled MSE over the full-sample MSE.
    pub scale_ratio: f64,
    pub pass: bool,
}

/// Relative difference with a floor tied to the largest reference entry, so
/// coefficients that are exactly zero do not blow up the ratio.
fn relative_discrepancy(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-8).max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Fits every study, synthesizes with `(X_i'X_i)^{-1}` blocks and the pooled
/// MSE, and compares against OLS on the concatenated data.
pub fn verify_equivalence(data: &RawDataset) -> Result<EquivalenceReport> {
    let studies = split_and_fit(data, &[])?;
    let catalog = data.catalog();
    let system = build_system(&studies, &catalog, &[], Mode::PooledMse, BuildOptions::default())?;
    let dfes: Vec<usize> = studies.iter().map(|s| s.error_df()).collect();
    let mses: Vec<f64> = studies.iter().map(|s| s.mse.expect("fitted studies carry an MSE")).collect();
    let s_star_sq = pooled_mse(&dfes, &mses)?;
    let result = pooled_gls_estimate(&system, s_star_sq)?;
    let full = ols_fit(&data.x, &data.y)?;

    let synthesized: Vec<f64> = result.beta_hat.iter().copied().collect();
    let pooled_sample: Vec<f64> = full.coefficients.iter().copied().collect();
    let expected_cov = &full.xtx_inverse * s_star_sq;
    let cov_scale = expected_cov.amax();
    let max_covariance_discrepancy = (&result.cov_beta - &expected_cov).amax() / cov_scale;
    let max_coefficient_discrepancy = relative_discrepancy(&synthesized, &pooled_sample);
    Ok(EquivalenceReport {
        studies: data.study_count(),
        cases: data.y.len(),
        pass: max_coefficient_discrepancy < EQUIVALENCE_TOL,
        synthesized,
        pooled_sample,
        max_coefficient_discrepancy,
        max_covariance_discrepancy,
        pooled_mse: s_star_sq,
        full_sample_mse: full.mse,
        scale_ratio: s_star_sq / full.mse,
    })
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Levene's test for equal residual variances, median-centred
/// (Brown-Forsythe): a one-way ANOVA F on `|r_ij - median_i|`.
pub fn levene_test(groups: &[Vec<f64>]) -> Result<TestResult> {
    if groups.len() < 2 {
        return Err(Error::Domain("Levene's test needs at least two groups".into()));
    }
    if let Some(i) = groups.iter().position(|g| g.len() < 2) {
        return Err(Error::Domain(format!("group {} has fewer than two cases", i + 1)));
    }
    let deviations: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let m = median(g);
            g.iter().map(|r| (r - m).abs()).collect()
        })
        .collect();
    let k = groups.len();
    let total: usize = groups.iter().map(Vec::len).sum();
    let grand = deviations.iter().flatten().sum::<f64>() / total as f64;
    let mut between = 0.0;
    let mut within = 0.0;
    for d in &deviations {
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        between += d.len() as f64 * (mean - grand).powi(2);
        within += d.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    }
    let (df1, df2) = (k - 1, total - k);
    let statistic = if within > 0.0 {
        (between / df1 as f64) / (within / df2 as f64)
    } else if between > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let p_value = if statistic.is_infinite() {
        0.0
    } else if df2 == 0 {
        1.0
    } else {
        let f = FisherSnedecor::new(df1 as f64, df2 as f64).map_err(|e| Error::Domain(e.to_string()))?;
        f.sf(statistic).clamp(0.0, 1.0)
    };
    Ok(TestResult {
        kind: TestKind::Levene,
        statistic,
        df: Some(df1),
        df2: Some(df2),
        p_value: Some(p_value),
    })
}

/// Residuals of each study's fit, grouped by study, for [`levene_test`].
pub fn study_residuals(data: &RawDataset, models: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    Ok(fit_studies(data, models)?
        .into_iter()
        .map(|f| f.fit.residuals.iter().copied().collect())
        .collect())
}

/// Monte Carlo p-values for Cochran's C and F_max.
///
/// Under equal error variances each `S_i^2 / sigma^2` is distributed as
/// `chi^2_{dfe_i} / dfe_i`, so the null distribution of both statistics can
/// be simulated from the error df alone. Returns `(p_c, p_fmax)`, each the
/// share of simulated statistics at least as large as the observed one.
pub fn variance_check_p_values(dfes: &[usize], mses: &[f64], replications: usize, seed: u64) -> Result<(f64, f64)> {
    if dfes.len() != mses.len() {
        return Err(Error::Domain(format!("{} error df but {} MSEs", dfes.len(), mses.len())));
    }
    if dfes.contains(&0) {
        return Err(Error::Domain("every study needs positive error df".into()));
    }
    if replications == 0 {
        return Err(Error::Domain("at least one replication required".into()));
    }
    let observed_c = cochran_c(mses)?.statistic;
    let observed_f = f_max(mses)?.statistic;
    let chis: Vec<ChiSquared<f64>> = dfes
        .iter()
        .map(|&d| ChiSquared::new(d as f64).map_err(|e| Error::Domain(e.to_string())))
        .collect::<Result<_>>()?;
    let mut rng = replication_rng(seed, 0);
    let (mut hits_c, mut hits_f) = (0usize, 0usize);
    let mut draw = vec![0.0; dfes.len()];
    for _ in 0..replications {
        for ((v, chi), &d) in draw.iter_mut().zip(&chis).zip(dfes) {
            *v = chi.sample(&mut rng) / d as f64;
        }
        hits_c += usize::from(cochran_c(&draw)?.statistic >= observed_c);
        hits_f += usize::from(f_max(&draw)?.statistic >= observed_f);
    }
    let n = replications as f64;
    Ok((hits_c as f64 / n, hits_f as f64 / n))
}
