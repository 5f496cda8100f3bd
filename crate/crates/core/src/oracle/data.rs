use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ols::{ols_fit, OlsFit};
use crate::error::{Error, Result};
use crate::model::{CovSpec, PredictorCatalog, StudyRegression};

/// Case-level data: design matrix with a leading constant column, outcome
/// and a study assignment for every case.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Index into `study_ids` for each case.
    pub labels: Vec<usize>,
    pub study_ids: Vec<String>,
}

impl RawDataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, labels: Vec<usize>, study_ids: Vec<String>) -> Result<Self> {
        if x.nrows() != y.len() || y.len() != labels.len() {
            return Err(Error::Domain(format!(
                "{} design rows, {} outcomes and {} study labels",
                x.nrows(),
                y.len(),
                labels.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::Domain("design matrix has no columns".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= study_ids.len()) {
            return Err(Error::Domain(format!("study label {bad} out of range")));
        }
        Ok(Self { x, y, labels, study_ids })
    }

    pub fn study_count(&self) -> usize {
        self.study_ids.len()
    }

    /// Number of coefficients in the full model (P + 1).
    pub fn coefficient_count(&self) -> usize {
        self.x.ncols()
    }

    pub fn rows_of(&self, study: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&r| self.labels[r] == study).collect()
    }

    pub fn study_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.study_count()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Design and outcome for one study restricted to `columns`.
    pub fn study_data(&self, study: usize, columns: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let rows = self.rows_of(study);
        let x = self.x.select_rows(&rows).select_columns(columns);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r]));
        (x, y)
    }

    /// Catalog `intercept, x1, ..., xP` matching the design columns.
    pub fn catalog(&self) -> PredictorCatalog {
        let names = std::iter::once("intercept".to_string())
            .chain((1..self.coefficient_count()).map(|j| format!("x{j}")));
        PredictorCatalog::with_intercept(names).expect("generated names are unique")
    }
}

/// Data-generating configuration for the Monte Carlo oracle.
///
/// Predictors are Gaussian with the given means, standard deviations and
/// correlation matrix; errors are `N(0, sigma_sq[i])` within study `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: Vec<usize>,
    /// True coefficients, intercept first.
    pub beta: Vec<f64>,
    pub predictor_means: Vec<f64>,
    pub predictor_sds: Vec<f64>,
    /// Row-major P x P correlation matrix.
    pub predictor_corr: Vec<f64>,
    pub sigma_sq: Vec<f64>,
    /// Catalog indices each study leaves out of its fitted model.
    #[serde(default)]
    pub omitted: Vec<Vec<usize>>,
    pub seed: u64,
}

/// Sample sizes of the 13 schools in the worked example.
pub const REFERENCE_SAMPLE_SIZES: [usize; 13] = [64, 59, 67, 45, 47, 45, 45, 56, 45, 51, 48, 45, 47];

/// School MSEs from the worked example.
pub const REFERENCE_MSES: [f64; 13] = [
    17.46, 14.24, 14.05, 10.75, 9.32, 14.60, 9.80, 13.32, 12.65, 6.50, 11.02, 17.65, 13.20,
];

impl SimConfig {
    /// Thirteen studies sized like the example schools, two predictors with
    /// correlation 0.70 on the math/reading scales, a common error variance
    /// equal to the pooled example MSE, and the full-sample coefficients as
    /// the truth.
    pub fn paper_shape(seed: u64) -> Self {
        Self {
            n: REFERENCE_SAMPLE_SIZES.to_vec(),
            beta: vec![2.552, 0.245, 0.358],
            predictor_means: vec![24.4, 13.9],
            predictor_sds: vec![10.4, 5.7],
            predictor_corr: vec![1.0, 0.70, 0.70, 1.0],
            sigma_sq: vec![12.83; 13],
            omitted: Vec::new(),
            seed,
        }
    }

    /// As [`SimConfig::paper_shape`] but with each study's error variance set
    /// to that school's reported MSE.
    pub fn paper_shape_unequal(seed: u64) -> Self {
        Self {
            sigma_sq: REFERENCE_MSES.to_vec(),
            ..Self::paper_shape(seed)
        }
    }

    pub fn study_count(&self) -> usize {
        self.n.len()
    }

    pub fn predictor_count(&self) -> usize {
        self.predictor_means.len()
    }

    /// Coefficients each study fits (catalog indices, intercept included).
    pub fn models(&self) -> Vec<Vec<usize>> {
        (0..self.study_count())
            .map(|i| {
                let omitted = self.omitted.get(i).map(Vec::as_slice).unwrap_or(&[]);
                (0..=self.predictor_count()).filter(|j| !omitted.contains(j)).collect()
            })
            .collect()
    }

    fn correlation(&self) -> DMatrix<f64> {
        let p = self.predictor_count();
        DMatrix::from_row_slice(p, p, &self.predictor_corr)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.predictor_count();
        let k = self.study_count();
        if k == 0 {
            return Err(Error::Domain("simulation needs at least one study".into()));
        }
        if self.beta.len() != p + 1 || self.predictor_sds.len() != p || self.predictor_corr.len() != p * p {
            return Err(Error::Domain("simulation dimensions are inconsistent".into()));
        }
        if self.sigma_sq.len() != k {
            return Err(Error::Domain(format!("{k} studies but {} error variances", self.sigma_sq.len())));
        }
        if self.sigma_sq.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Domain("error variances must be non-negative".into()));
        }
        if self.predictor_sds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Domain("predictor standard deviations must be positive".into()));
        }
        if !self.omitted.is_empty() && self.omitted.len() != k {
            return Err(Error::Domain("omitted-predictor pattern must list every study".into()));
        }
        if self.omitted.iter().flatten().any(|&j| j > p) {
            return Err(Error::Domain("omitted predictor outside the model".into()));
        }
        for (i, model) in self.models().iter().enumerate() {
            if self.n[i] < model.len() + 1 {
                return Err(Error::Domain(format!("study {} is too small for its model", i + 1)));
            }
        }
        if p > 0 {
            let corr = self.correlation();
            let symmetric = (0..p).all(|i| (0..p).all(|j| (corr[(i, j)] - corr[(j, i)]).abs() < 1e-12));
            let unit_diag = (0..p).all(|i| (corr[(i, i)] - 1.0).abs() < 1e-12);
            if !symmetric || !unit_diag || corr.cholesky().is_none() {
                return Err(Error::Domain("predictor correlation matrix is not a valid correlation matrix".into()));
            }
        }
        Ok(())
    }
}

/// Random stream for replication `replication` under master seed `seed`.
/// Each replication gets its own ChaCha stream, so results do not depend on
/// the order in which replications run.
pub fn replication_rng(seed: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication);
    rng
}

/// Draws a dataset from `config` using its own seed (stream 0).
pub fn generate(config: &SimConfig) -> Result<RawDataset> {
    generate_with(config, &mut replication_rng(config.seed, 0))
}

pub fn generate_with(config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<RawDataset> {
    config.validate()?;
    let p = config.predictor_count();
    let factor = if p > 0 {
        config.correlation().cholesky().expect("validated").l()
    } else {
        DMatrix::zeros(0, 0)
    };
    let total: usize = config.n.iter().sum();
    let mut x = DMatrix::zeros(total, p + 1);
    let mut y = DVector::zeros(total);
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    let mut z = DVector::zeros(p);
    for (study, &n) in config.n.iter().enumerate() {
        let sigma = config.sigma_sq[study].sqrt();
        for _ in 0..n {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let correlated = &factor * &z;
            x[(row, 0)] = 1.0;
            let mut mean = config.beta[0];
            for j in 0..p {
                let value = config.predictor_means[j] + config.predictor_sds[j] * correlated[j];
                x[(row, j + 1)] = value;
                mean += config.beta[j + 1] * value;
            }
            let noise: f64 = StandardNormal.sample(rng);
            y[row] = mean + sigma * noise;
            labels.push(study);
            row += 1;
        }
    }
    let ids = (1..=config.study_count()).map(|i| i.to_string()).collect();
    RawDataset::new(x, y, labels, ids)
}

/// One study's OLS fit alongside the summary record built from it.
#[derive(Debug, Clone)]
pub struct StudyFit {
    pub study: StudyRegression,
    pub columns: Vec<usize>,
    pub fit: OlsFit,
}

/// Fits each study's model by OLS. `models[i]` lists the design columns
/// (catalog indices) study `i` uses; an empty slice means the full model
/// for every study.
pub fn fit_studies(data: &RawDataset, models: &[Vec<usize>]) -> Result<Vec<StudyFit>> {
    if !models.is_empty() && models.len() != data.study_count() {
        return Err(Error::Domain(format!(
            "{} model specifications for {} studies",
            models.len(),
            data.study_count()
        )));
    }
    let full: Vec<usize> = (0..data.coefficient_count()).collect();
    (0..data.study_count())
        .map(|i| {
            let columns = models.get(i).cloned().unwrap_or_else(|| full.clone());
            let id = &data.study_ids[i];
            if columns.is_empty() || columns.iter().any(|&c| c >= data.coefficient_count()) {
                return Err(Error::study(id, "invalid model specification"));
            }
            let (x, y) = data.study_data(i, &columns);
            let fit = ols_fit(&x, &y).map_err(|e| Error::study(id, e.to_string()))?;
            let coefficients: Vec<(usize, f64)> =
                columns.iter().zip(fit.coefficients.iter()).map(|(&c, &b)| (c, b)).collect();
            let study = StudyRegression::new(id.clone(), x.nrows(), &coefficients, CovSpec::Full(fit.cov.clone()))
                .with_mse(fit.mse)
                .with_dfe(fit.dfe);
            Ok(StudyFit { study, columns, fit })
        })
        .collect()
}

/// Per-study OLS fits as summary records ready for synthesis.
pub fn split_and_fit(data: &RawDataset, models: &[Vec<usize>]) -> Result<Vec<StudyRegression>> {
    Ok(fit_studies(data, models)?.into_iter().map(|f| f.study).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let a = generate(&SimConfig::paper_shape(7)).unwrap();
        let b = generate(&SimConfig::paper_shape(7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&SimConfig::paper_shape(8)).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn noise_free_fits_are_exact() {
        let mut config = SimConfig::paper_shape(3);
        config.sigma_sq = vec![0.0; 13];
        let data = generate(&config).unwrap();
        for study in split_and_fit(&data, &[]).unwrap() {
            for (b, t) in study.slopes.iter().zip(&config.beta) {
                assert!((b - t).abs() < 1e-9, "{b} vs {t}");
            }
            assert!(study.mse.unwrap() < 1e-18);
        }
    }

    #[test]
    fn paper_shape_gives_thirteen_three_coefficient_studies() {
        let data = generate(&SimConfig::paper_shape(1)).unwrap();
        let studies = split_and_fit(&data, &[]).unwrap();
        assert_eq!(studies.len(), 13);
        let catalog = data.catalog();
        for (s, n) in studies.iter().zip(REFERENCE_SAMPLE_SIZES) {
            assert_eq!(s.coefficient_count(), 3);
            assert_eq!(s.n, n);
            assert!(crate::model::validate_study(s, &catalog).is_valid());
        }
    }

    #[test]
    fn omitted_predictor_drops_its_label() {
        let mut config = SimConfig::paper_shape(2);
        config.omitted = vec![Vec::new(); 13];
        config.omitted[4] = vec![2];
        let data = generate(&config).unwrap();
        let studies = split_and_fit(&data, &config.models()).unwrap();
        assert_eq!(studies[4].labels, vec![0, 1]);
        assert_eq!(studies[3].labels, vec![0, 1, 2]);
    }

    #[test]
    fn empirical_correlation_near_target() {
        let mut config = SimConfig::paper_shape(11);
        config.n = vec![2000];
        config.sigma_sq = vec![1.0];
        let data = generate(&config).unwrap();
        let a = data.x.column(1);
        let b = data.x.column(2);
        let (ma, mb) = (a.mean(), b.mean());
        let cov: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let r = cov / (va * vb).sqrt();
        assert!((r - 0.70).abs() < 0.05, "r = {r}");
    }

    #[test]
    fn invalid_correlation_rejected() {
        let mut config = SimConfig::paper_shape(1);
        config.predictor_corr = vec![1.0, 1.2, 1.2, 1.0];
        assert!(matches!(generate(&config), Err(Error::Domain(_))));
    }

    #[test]
    fn rank_deficient_study_is_named() {
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else if i < 4 { 2.0 } else { i as f64 });
        let y = DVector::from_fn(8, |i, _| i as f64);
        let data = RawDataset::new(x, y, vec![0, 0, 0, 0, 1, 1, 1, 1], vec!["a".into(), "b".into()]).unwrap();
        let err = split_and_fit(&data, &[]).unwrap_err();
        assert!(err.to_string().contains("study a"), "{err}");
    }
}
