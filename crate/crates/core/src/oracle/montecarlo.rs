//! Monte Carlo calibration of the synthesis estimators.
//!
//! Every replication draws a fresh dataset from its own random stream, fits
//! the studies, synthesizes with each requested method and records the
//! estimates, model-based variances, interval coverage and homogeneity test
//! decisions. Replications run in parallel; the summaries are reduced in
//! replication order so a given seed always yields the same report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{fit_studies, generate_with, replication_rng, SimConfig, StudyFit};
use crate::design::{build_system, BuildOptions, Mode};
use crate::error::{Error, Result};
use crate::estimators::{gls_estimate, pooled_gls_estimate, pooled_mse, SynthesisResult};
use crate::inference::{confidence_interval, q_b, q_e};
use crate::model::{CovSpec, StudyRegression};

/// Where the per-study covariance blocks come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    /// `(X_i'X_i)^{-1} S_i^2`, as a primary study would report it.
    Estimated,
    /// `(X_i'X_i)^{-1} sigma_i^2` with the generating error variance.
    Known,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub sim: SimConfig,
    pub replications: usize,
    pub alpha: f64,
    pub covariance: CovarianceSource,
    pub methods: Vec<Mode>,
}

impl MonteCarloConfig {
    pub fn new(sim: SimConfig, replications: usize) -> Self {
        Self {
            sim,
            replications,
            alpha: 0.05,
            covariance: CovarianceSource::Estimated,
            methods: vec![Mode::Gls, Mode::WlsDiagonal, Mode::PooledMse],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub label: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Sample variance of the estimates across replications.
    pub empirical_variance: f64,
    /// Mean of the model-based variances.
    pub mean_model_variance: f64,
    /// `mean_model_variance / empirical_variance`; below 1 means the model
    /// understates the sampling variance.
    pub variance_ratio: f64,
    /// Delta-method Monte Carlo standard error of `variance_ratio`.
    pub variance_ratio_se: f64,
    /// Share of `1 - alpha` intervals covering the truth.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Mode,
    pub replications: usize,
    pub failures: usize,
    pub params: Vec<ParamSummary>,
    /// Rejection rates at `alpha`.
    pub q_e_rejection: f64,
    pub q_e_slopes_only_rejection: f64,
    pub q_b_rejection: f64,
    pub q_b_slopes_only_rejection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub seed: u64,
    pub replications: usize,
    pub alpha: f64,
    pub covariance: CovarianceSource,
    pub methods: Vec<MethodSummary>,
}

#[derive(Debug, Clone)]
struct Draw {
    estimates: Vec<f64>,
    variances: Vec<f64>,
    covered: Vec<bool>,
    q_e: bool,
    q_e_slopes: bool,
    q_b: bool,
    q_b_slopes: bool,
}

fn study_for(fit: &StudyFit, covariance: CovarianceSource, sigma_sq: f64) -> StudyRegression {
    match covariance {
        CovarianceSource::Estimated => fit.study.clone(),
        CovarianceSource::Known => {
            let mut study = fit.study.clone();
            study.cov = CovSpec::Full(&fit.fit.xtx_inverse * sigma_sq);
            study.mse = Some(sigma_sq);
            study
        }
    }
}

fn synthesize(studies: &[StudyRegression], catalog: &crate::PredictorCatalog, method: Mode) -> Result<(crate::StackedSystem, SynthesisResult)> {
    let system = build_system(studies, catalog, &[], method, BuildOptions::default())?;
    let result = match method {
        Mode::PooledMse => {
            let dfes: Vec<usize> = studies.iter().map(|s| s.error_df()).collect();
            let mses: Vec<f64> = studies.iter().map(|s| s.mse.unwrap_or(f64::NAN)).collect();
            pooled_gls_estimate(&system, pooled_mse(&dfes, &mses)?)?
        }
        _ => gls_estimate(&system)?,
    };
    Ok((system, result))
}

fn one_replication(config: &MonteCarloConfig, replication: usize) -> Result<Vec<Result<Draw>>> {
    let mut rng = replication_rng(config.sim.seed, replication as u64);
    let data = generate_with(&config.sim, &mut rng)?;
    let fits = fit_studies(&data, &config.sim.models())?;
    let catalog = data.catalog();
    let studies: Vec<StudyRegression> = fits
        .iter()
        .zip(&config.sim.sigma_sq)
        .map(|(f, &s2)| study_for(f, config.covariance, s2))
        .collect();
    Ok(config
        .methods
        .iter()
        .map(|&method| {
            let (system, result) = synthesize(&studies, &catalog, method)?;
            let mut covered = Vec::with_capacity(result.beta_hat.len());
            for p in 0..result.beta_hat.len() {
                let (lo, hi) = confidence_interval(result.beta_hat[p], result.variance(p), config.alpha)?;
                let truth = config.sim.beta[result.param_catalog[p].expect("no moderators in simulations")];
                covered.push(lo <= truth && truth <= hi);
            }
            let reject = |p: Option<f64>| p.is_some_and(|p| p < config.alpha);
            Ok(Draw {
                estimates: result.beta_hat.iter().copied().collect(),
                variances: result.cov_beta.diagonal().iter().copied().collect(),
                covered,
                q_e: reject(q_e(&system, &result, false)?.test.p_value),
                q_e_slopes: reject(q_e(&system, &result, true)?.test.p_value),
                q_b: reject(q_b(&result, false)?.p_value),
                q_b_slopes: reject(q_b(&result, true)?.p_value),
            })
        })
        .collect())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance and the standard error of that variance estimate.
fn variance_with_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = mean(values);
    let m2 = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    let se = ((m4 - m2 * m2).max(0.0) / n).sqrt();
    (var, se)
}

fn summarize(method: Mode, labels: &[String], truths: &[f64], draws: &[Draw], failures: usize) -> MethodSummary {
    let count = draws.len();
    let rate = |f: fn(&Draw) -> bool| draws.iter().filter(|d| f(d)).count() as f64 / count.max(1) as f64;
    let params = labels
        .iter()
        .enumerate()
        .map(|(p, label)| {
            let estimates: Vec<f64> = draws.iter().map(|d| d.estimates[p]).collect();
            let variances: Vec<f64> = draws.iter().map(|d| d.variances[p]).collect();
            let mean_estimate = mean(&estimates);
            let (empirical_variance, empirical_se) = variance_with_se(&estimates);
            let mean_model_variance = mean(&variances);
            let (model_var_spread, _) = variance_with_se(&variances);
            let model_se = (model_var_spread / count as f64).sqrt();
            let variance_ratio = mean_model_variance / empirical_variance;
            let variance_ratio_se = variance_ratio
                * ((model_se / mean_model_variance).powi(2) + (empirical_se / empirical_variance).powi(2)).sqrt();
            ParamSummary {
                label: label.clone(),
                truth: truths[p],
                mean_estimate,
                bias: mean_estimate - truths[p],
                empirical_variance,
                mean_model_variance,
                variance_ratio,
                variance_ratio_se,
                coverage: draws.iter().filter(|d| d.covered[p]).count() as f64 / count as f64,
            }
        })
        .collect();
    MethodSummary {
        method,
        replications: count,
        failures,
        params,
        q_e_rejection: rate(|d| d.q_e),
        q_e_slopes_only_rejection: rate(|d| d.q_e_slopes),
        q_b_rejection: rate(|d| d.q_b),
        q_b_slopes_only_rejection: rate(|d| d.q_b_slopes),
    }
}

/// Runs the Monte Carlo study described by `config`.
pub fn run_monte_carlo(config: &MonteCarloConfig) -> Result<MonteCarloReport> {
    config.sim.validate()?;
    if config.replications < 2 {
        return Err(Error::Domain("at least two replications required".into()));
    }
    if config.methods.is_empty() {
        return Err(Error::Domain("no synthesis methods requested".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Domain(format!("alpha {} outside (0, 1)", config.alpha)));
    }
    if config.sim.models().iter().any(|m| m.len() != config.sim.beta.len()) {
        return Err(Error::Domain("Monte Carlo runs require every study to fit the full model".into()));
    }
    let outcomes: Vec<Vec<Result<Draw>>> = (0..config.replications)
        .into_par_iter()
        .map(|r| one_replication(config, r))
        .collect::<Result<_>>()?;

    let catalog_labels: Vec<String> = std::iter::once("intercept".to_string())
        .chain((1..config.sim.beta.len()).map(|j| format!("x{j}")))
        .collect();
    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(m, &method)| {
            let mut draws = Vec::with_capacity(outcomes.len());
            let mut failures = 0;
            for outcome in &outcomes {
                match &outcome[m] {
                    Ok(d) => draws.push(d.clone()),
                    Err(_) => failures += 1,
                }
            }
            if draws.len() < 2 {
                return Err(Error::Singular(format!("method {method} failed in almost every replication")));
            }
            Ok(summarize(method, &catalog_labels, &config.sim.beta, &draws, failures))
        })
        .collect::<Result<_>>()?;
    Ok(MonteCarloReport {
        seed: config.sim.seed,
        replications: config.replications,
        alpha: config.alpha,
        covariance: config.covariance,
        methods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_report() {
        let mut config = MonteCarloConfig::new(SimConfig::paper_shape(42), 40);
        config.methods = vec![Mode::Gls, Mode::PooledMse];
        let a = run_monte_carlo(&config).unwrap();
        let b = run_monte_carlo(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.methods.len(), 2);
        assert_eq!(a.methods[0].params.len(), 3);
    }

    #[test]
    fn variance_se_of_constant_is_zero() {
        let (v, se) = variance_with_se(&[2.0, 2.0, 2.0]);
        assert_eq!(v, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn rejects_reduced_models() {
        let mut sim = SimConfig::paper_shape(1);
        sim.omitted = vec![Vec::new(); 13];
        sim.omitted[0] = vec![1];
        assert!(run_monte_carlo(&MonteCarloConfig::new(sim, 10)).is_err());
    }
}
