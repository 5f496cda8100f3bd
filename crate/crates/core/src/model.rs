//! Study-level regression results, their validation, covariance resolution
//! and a couple of scalar effect converters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Common slope correlation used when filling off-diagonal covariances from
/// standard errors and no other value is supplied.
pub const DEFAULT_CORR_FILL: f64 = 0.2;

/// Ordered list of coefficient names shared by every study.
///
/// When `has_intercept` is set, index 0 is the intercept and indices
/// `1..=P` are the predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorCatalog {
    names: Vec<String>,
    has_intercept: bool,
}

impl PredictorCatalog {
    /// Catalog whose first entry is the intercept.
    pub fn with_intercept<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::new(names, true)
    }

    /// Catalog with predictors only (single focal slope workflows).
    pub fn without_intercept<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::new(names, false)
    }

    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>, has_intercept: bool) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Validation("predictor catalog is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(Error::Validation("predictor names must be non-empty".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate predictor name '{name}'")));
            }
        }
        Ok(Self { names, has_intercept })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn has_intercept(&self) -> bool {
        self.has_intercept
    }

    /// Number of predictors P, not counting the intercept.
    pub fn predictor_count(&self) -> usize {
        self.names.len() - usize::from(self.has_intercept)
    }

    /// Total number of catalog entries (P + 1 with an intercept).
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn is_intercept(&self, index: usize) -> bool {
        self.has_intercept && index == 0
    }
}

/// How a study describes the sampling covariance of its coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum CovSpec {
    /// The complete covariance matrix.
    Full(DMatrix<f64>),
    /// Standard errors only; off-diagonals unknown.
    StandardErrors(DVector<f64>),
    /// Standard errors plus an assumed common correlation among coefficients.
    StandardErrorsWithCommonCorr(DVector<f64>, f64),
    /// `(X'X)^{-1}` together with the study's MSE.
    XtXInverseWithMse(DMatrix<f64>, f64),
}

impl CovSpec {
    fn dimension(&self) -> usize {
        match self {
            CovSpec::Full(m) | CovSpec::XtXInverseWithMse(m, _) => m.nrows(),
            CovSpec::StandardErrors(se) | CovSpec::StandardErrorsWithCommonCorr(se, _) => se.len(),
        }
    }

    fn is_square(&self) -> bool {
        match self {
            CovSpec::Full(m) | CovSpec::XtXInverseWithMse(m, _) => m.is_square(),
            _ => true,
        }
    }
}

/// One study's reported regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRegression {
    pub id: String,
    pub n: usize,
    /// Error degrees of freedom; `None` means n minus the coefficient count.
    pub dfe: Option<usize>,
    /// Catalog index of each reported coefficient, in the order of `slopes`.
    pub labels: Vec<usize>,
    pub slopes: DVector<f64>,
    pub mse: Option<f64>,
    pub cov: CovSpec,
    pub features: BTreeMap<String, bool>,
}

impl StudyRegression {
    /// Builds a study from `(catalog index, coefficient)` pairs. Coefficients
    /// are kept in the order given; the covariance must follow that order.
    pub fn new(id: impl Into<String>, n: usize, coefficients: &[(usize, f64)], cov: CovSpec) -> Self {
        Self {
            id: id.into(),
            n,
            dfe: None,
            labels: coefficients.iter().map(|c| c.0).collect(),
            slopes: DVector::from_iterator(coefficients.len(), coefficients.iter().map(|c| c.1)),
            mse: None,
            cov,
            features: BTreeMap::new(),
        }
    }

    pub fn with_mse(mut self, mse: f64) -> Self {
        self.mse = Some(mse);
        self
    }

    pub fn with_dfe(mut self, dfe: usize) -> Self {
        self.dfe = Some(dfe);
        self
    }

    pub fn with_feature(mut self, name: impl Into<String>, value: bool) -> Self {
        self.features.insert(name.into(), value);
        self
    }

    pub fn coefficient_count(&self) -> usize {
        self.labels.len()
    }

    /// Reported error df, or n minus the number of reported coefficients.
    pub fn error_df(&self) -> usize {
        self.dfe.unwrap_or_else(|| self.n.saturating_sub(self.coefficient_count()))
    }

    pub fn position_of(&self, catalog_index: usize) -> Option<usize> {
        self.labels.iter().position(|&l| l == catalog_index)
    }
}

/// Where a resolved covariance block came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rho", rename_all = "snake_case")]
pub enum Provenance {
    Reported,
    DiagonalOnly,
    CorrFilled(f64),
    Recovered,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Reported => f.write_str("reported"),
            Provenance::DiagonalOnly => f.write_str("diagonal-only"),
            Provenance::CorrFilled(rho) => write!(f, "corr-filled({rho})"),
            Provenance::Recovered => f.write_str("recovered"),
        }
    }
}

/// A symmetric positive-definite covariance for one study's coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeCovariance {
    matrix: DMatrix<f64>,
    provenance: Provenance,
}

impl SlopeCovariance {
    /// Checks symmetry and positive-definiteness (by Cholesky) and names
    /// `study` in the error when either fails.
    pub fn new(matrix: DMatrix<f64>, provenance: Provenance, study: &str) -> Result<Self> {
        if !linalg::is_symmetric(&matrix, linalg::SYMMETRY_TOL) {
            return Err(Error::study(study, "covariance matrix is not symmetric"));
        }
        let matrix = linalg::symmetrize(&matrix);
        if linalg::cholesky(&matrix).is_none() {
            return Err(Error::NotPositiveDefinite { study: study.to_string() });
        }
        Ok(Self { matrix, provenance })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
}

/// Outcome of validating studies against a catalog.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    fn merge(&mut self, other: ValidationReport) {
        self.errors.extend(other.errors);
        self.warnings.extend(other.warnings);
    }

    /// Converts the first error (if any) into an [`Error::Validation`].
    pub fn into_result(self) -> Result<Vec<String>> {
        if self.errors.is_empty() {
            Ok(self.warnings)
        } else {
            Err(Error::Validation(self.errors.join("; ")))
        }
    }
}

pub const WARN_NO_OFF_DIAGONALS: &str = "off-diagonal covariance unavailable";
pub const WARN_NO_MSE: &str = "MSE not reported";

/// Checks one study against the catalog. Never fails; problems are listed in
/// the returned report.
pub fn validate_study(study: &StudyRegression, catalog: &PredictorCatalog) -> ValidationReport {
    let mut report = ValidationReport::default();
    let id = &study.id;
    let mut err = |msg: String| report.errors.push(format!("study {id}: {msg}"));

    if study.labels.is_empty() {
        err("no coefficients reported".into());
    }
    if study.labels.len() != study.slopes.len() {
        err(format!(
            "{} labels for {} coefficients",
            study.labels.len(),
            study.slopes.len()
        ));
    }
    let mut seen = BTreeSet::new();
    for &label in &study.labels {
        if label >= catalog.len() {
            err(format!("coefficient index {label} is not in the catalog"));
        } else if !seen.insert(label) {
            err(format!("coefficient '{}' reported twice", catalog.names()[label]));
        }
    }
    if study.slopes.iter().any(|v| !v.is_finite()) {
        err("non-finite coefficient".into());
    }

    let predictors = study.labels.iter().filter(|&&l| !catalog.is_intercept(l)).count();
    if study.n < predictors + 2 {
        err(format!("n = {} is too small for {} predictors", study.n, predictors));
    }
    if study.error_df() < 1 {
        err("error degrees of freedom must be at least 1".into());
    }
    match study.mse {
        Some(m) if !(m > 0.0 && m.is_finite()) => err(format!("MSE must be positive, got {m}")),
        _ => {}
    }

    let dim = study.coefficient_count();
    if !study.cov.is_square() {
        err("covariance matrix is not square".into());
    } else if study.cov.dimension() != dim {
        err(format!(
            "covariance dimension {} does not match {} coefficients",
            study.cov.dimension(),
            dim
        ));
    } else {
        match &study.cov {
            CovSpec::Full(m) => {
                if !linalg::is_symmetric(m, linalg::SYMMETRY_TOL) {
                    err("covariance matrix is not symmetric".into());
                }
                if m.diagonal().iter().any(|&v| !(v > 0.0)) {
                    err("covariance diagonal must be positive".into());
                }
            }
            CovSpec::StandardErrors(se) | CovSpec::StandardErrorsWithCommonCorr(se, _) => {
                if se.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    err("standard errors must be positive".into());
                }
                if let CovSpec::StandardErrorsWithCommonCorr(_, rho) = &study.cov {
                    if !(*rho > -1.0 && *rho < 1.0) {
                        err(format!("common correlation {rho} outside (-1, 1)"));
                    }
                }
            }
            CovSpec::XtXInverseWithMse(m, s2) => {
                if !(*s2 > 0.0 && s2.is_finite()) {
                    err(format!("MSE must be positive, got {s2}"));
                }
                if !linalg::is_symmetric(m, linalg::SYMMETRY_TOL) || linalg::cholesky(m).is_none() {
                    err("(X'X)^-1 must be symmetric positive-definite".into());
                }
            }
        }
    }

    if study.mse.is_none() && !matches!(study.cov, CovSpec::XtXInverseWithMse(..)) {
        report.warnings.push(format!("study {id}: {WARN_NO_MSE}"));
    }
    if matches!(study.cov, CovSpec::StandardErrors(_)) && dim > 1 {
        report.warnings.push(format!("study {id}: {WARN_NO_OFF_DIAGONALS}"));
    }
    report
}

/// Validates every study and adds cross-study checks: empty input, duplicate
/// ids, catalog entries no study reports, and coefficients missing from some
/// studies.
pub fn validate_studies(studies: &[StudyRegression], catalog: &PredictorCatalog) -> ValidationReport {
    let mut report = ValidationReport::default();
    if studies.is_empty() {
        report.errors.push("at least one study required".into());
        return report;
    }
    let mut ids = BTreeSet::new();
    for s in studies {
        if !ids.insert(s.id.as_str()) {
            report.errors.push(format!("duplicate study id '{}'", s.id));
        }
        report.merge(validate_study(s, catalog));
    }
    for (index, name) in catalog.names().iter().enumerate() {
        let count = studies.iter().filter(|s| s.labels.contains(&index)).count();
        if count == 0 {
            // left to the design rank check, which names unidentified parameters
            report.warnings.push(format!("'{name}' is not reported by any study"));
        } else if count < studies.len() {
            report
                .warnings
                .push(format!("'{name}' is reported by {count} of {} studies", studies.len()));
        }
    }
    report
}

/// Turns a study's covariance description into a positive-definite matrix.
pub fn resolve_covariance(study: &StudyRegression) -> Result<SlopeCovariance> {
    let dim = study.coefficient_count();
    if study.cov.dimension() != dim || !study.cov.is_square() {
        return Err(Error::study(&study.id, "covariance dimension does not match coefficients"));
    }
    let (matrix, provenance) = match &study.cov {
        CovSpec::Full(m) => (m.clone(), Provenance::Reported),
        CovSpec::StandardErrors(se) => {
            check_standard_errors(&study.id, se)?;
            (DMatrix::from_diagonal(&se.map(|s| s * s)), Provenance::DiagonalOnly)
        }
        CovSpec::StandardErrorsWithCommonCorr(se, rho) => {
            check_standard_errors(&study.id, se)?;
            if !(*rho > -1.0 && *rho < 1.0) {
                return Err(Error::study(&study.id, format!("common correlation {rho} outside (-1, 1)")));
            }
            (corr_filled(se, *rho), Provenance::CorrFilled(*rho))
        }
        CovSpec::XtXInverseWithMse(m, s2) => {
            if !(*s2 > 0.0 && s2.is_finite()) {
                return Err(Error::study(&study.id, format!("MSE must be positive, got {s2}")));
            }
            (m * *s2, Provenance::Recovered)
        }
    };
    SlopeCovariance::new(matrix, provenance, &study.id)
}

/// Like [`resolve_covariance`], but standard-error-only studies are filled
/// with the common correlation `rho` when one is given.
pub fn resolve_covariance_with_fill(study: &StudyRegression, rho: Option<f64>) -> Result<SlopeCovariance> {
    match (&study.cov, rho) {
        (CovSpec::StandardErrors(se), Some(rho)) => {
            let filled = StudyRegression {
                cov: CovSpec::StandardErrorsWithCommonCorr(se.clone(), rho),
                ..study.clone()
            };
            resolve_covariance(&filled)
        }
        _ => resolve_covariance(study),
    }
}

fn check_standard_errors(study: &str, se: &DVector<f64>) -> Result<()> {
    if se.iter().all(|&v| v > 0.0 && v.is_finite()) {
        Ok(())
    } else {
        Err(Error::study(study, "standard errors must be positive"))
    }
}

fn corr_filled(se: &DVector<f64>, rho: f64) -> DMatrix<f64> {
    let n = se.len();
    DMatrix::from_fn(n, n, |i, j| if i == j { se[i] * se[i] } else { rho * se[i] * se[j] })
}

/// Divides a covariance by the study MSE, giving `(X'X)^{-1}`.
pub fn recover_xtx_inverse(cov: &SlopeCovariance, mse: f64) -> Result<DMatrix<f64>> {
    if !(mse > 0.0 && mse.is_finite()) {
        return Err(Error::Domain(format!("MSE must be positive, got {mse}")));
    }
    match cov.provenance() {
        Provenance::Reported | Provenance::Recovered => Ok(cov.matrix() / mse),
        other => Err(Error::Domain(format!(
            "(X'X)^-1 cannot be recovered from a {other} covariance"
        ))),
    }
}

/// Slope of a simple regression from the correlation and the two SDs.
pub fn bivariate_slope(r_xy: f64, s_y: f64, s_x: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&r_xy) {
        return Err(Error::Domain(format!("correlation {r_xy} outside [-1, 1]")));
    }
    if !(s_x > 0.0) || !(s_y > 0.0) {
        return Err(Error::Domain("standard deviations must be positive".into()));
    }
    Ok(r_xy * s_y / s_x)
}

/// Standardized mean difference from a t statistic.
pub fn t_to_d(t: f64, df: u64) -> Result<f64> {
    if df < 1 {
        return Err(Error::Domain("degrees of freedom must be at least 1".into()));
    }
    Ok(2.0 * t / (df as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> PredictorCatalog {
        PredictorCatalog::with_intercept(["intercept", "math", "reading"]).unwrap()
    }

    // School 1 of the worked example: coefficients, MSE and the covariance
    // rebuilt from the printed Cov(b) upper triangle.
    fn school_one() -> StudyRegression {
        let cov = DMatrix::from_row_slice(
            3,
            3,
            &[1.9340, -0.0648, -0.0302, -0.0648, 0.0058, -0.0043, -0.0302, -0.0043, 0.0098],
        );
        StudyRegression::new("1", 64, &[(0, 5.470), (1, 0.219), (2, 0.260)], CovSpec::Full(cov)).with_mse(17.46)
    }

    #[test]
    fn school_one_is_valid_without_warnings() {
        let report = validate_study(&school_one(), &catalog());
        assert!(report.is_valid(), "{:?}", report.errors);
        assert!(report.warnings.is_empty(), "{:?}", report.warnings);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut s = school_one();
        s.cov = CovSpec::Full(DMatrix::identity(2, 2));
        let report = validate_study(&s, &catalog());
        assert!(report.errors.iter().any(|e| e.contains("dimension")));
    }

    #[test]
    fn standard_errors_only_warns() {
        let mut s = school_one();
        s.cov = CovSpec::StandardErrors(DVector::from_vec(vec![1.39, 0.076, 0.099]));
        let report = validate_study(&s, &catalog());
        assert!(report.is_valid());
        assert!(report.warnings.iter().any(|w| w.contains(WARN_NO_OFF_DIAGONALS)));
    }

    #[test]
    fn nonpositive_mse_and_duplicate_labels_are_errors() {
        let mut s = school_one().with_mse(0.0);
        s.labels = vec![0, 1, 1];
        let report = validate_study(&s, &catalog());
        assert!(report.errors.iter().any(|e| e.contains("MSE")));
        assert!(report.errors.iter().any(|e| e.contains("twice")));
    }

    #[test]
    fn catalog_rejects_duplicates_and_blanks() {
        assert!(PredictorCatalog::with_intercept(["a", "a"]).is_err());
        assert!(PredictorCatalog::with_intercept(["a", " "]).is_err());
        let c = catalog();
        assert_eq!(c.predictor_count(), 2);
        assert!(c.is_intercept(0));
    }

    #[test]
    fn empty_study_list_rejected() {
        let report = validate_studies(&[], &catalog());
        assert_eq!(report.errors, vec!["at least one study required".to_string()]);
    }

    #[test]
    fn corr_fill_product_formula() {
        let se = DVector::from_vec(vec![0.1, 0.2]);
        let s = StudyRegression::new("a", 30, &[(1, 0.0), (2, 0.0)], CovSpec::StandardErrorsWithCommonCorr(se, 0.2));
        let cov = resolve_covariance(&s).unwrap();
        let expected = [[0.01, 0.004], [0.004, 0.04]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((cov.matrix()[(i, j)] - expected[i][j]).abs() < 1e-15);
            }
        }
        assert_eq!(cov.provenance(), Provenance::CorrFilled(0.2));
    }

    #[test]
    fn standard_errors_give_diagonal() {
        let se = DVector::from_vec(vec![0.1, 0.2]);
        let s = StudyRegression::new("a", 30, &[(1, 0.0), (2, 0.0)], CovSpec::StandardErrors(se));
        let cov = resolve_covariance(&s).unwrap();
        assert!((cov.matrix()[(0, 0)] - 0.01).abs() < 1e-15);
        assert!((cov.matrix()[(1, 1)] - 0.04).abs() < 1e-15);
        assert_eq!(cov.matrix()[(0, 1)], 0.0);
        assert_eq!(cov.provenance(), Provenance::DiagonalOnly);
    }

    #[test]
    fn xtx_inverse_scaled_by_mse() {
        let m = DMatrix::from_row_slice(1, 1, &[0.1107]);
        let s = StudyRegression::new("1", 64, &[(0, 5.47)], CovSpec::XtXInverseWithMse(m, 17.463));
        let cov = resolve_covariance(&s).unwrap();
        assert!((cov.matrix()[(0, 0)] - 1.933).abs() < 5e-4);
        assert_eq!(cov.provenance(), Provenance::Recovered);
    }

    #[test]
    fn large_rho_with_three_coefficients_can_fail() {
        let se = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let s = StudyRegression::new("bad", 30, &[(0, 0.0), (1, 0.0), (2, 0.0)], CovSpec::StandardErrorsWithCommonCorr(se, -0.6));
        match resolve_covariance(&s) {
            Err(Error::NotPositiveDefinite { study }) => assert_eq!(study, "bad"),
            other => panic!("expected singularity error, got {other:?}"),
        }
    }

    #[test]
    fn recover_matches_printed_values() {
        let one = SlopeCovariance::new(DMatrix::from_element(1, 1, 1.9340), Provenance::Reported, "1").unwrap();
        let x = recover_xtx_inverse(&one, 17.46).unwrap()[(0, 0)];
        assert!((x - 0.11076).abs() < 1e-5, "{x}");
        assert!((x - 0.1107).abs() < 5e-4, "{x}");
        let two = SlopeCovariance::new(DMatrix::from_element(1, 1, 1.3018), Provenance::Reported, "2").unwrap();
        let x = recover_xtx_inverse(&two, 14.24).unwrap()[(0, 0)];
        assert!((x - 0.09141).abs() < 1e-5, "{x}");
        let id = SlopeCovariance::new(DMatrix::identity(3, 3), Provenance::Reported, "id").unwrap();
        assert_eq!(recover_xtx_inverse(&id, 1.0).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn recover_rejects_bad_mse_and_filled_covariances() {
        let id = SlopeCovariance::new(DMatrix::identity(2, 2), Provenance::Reported, "a").unwrap();
        assert!(matches!(recover_xtx_inverse(&id, 0.0), Err(Error::Domain(_))));
        let diag = SlopeCovariance::new(DMatrix::identity(2, 2), Provenance::DiagonalOnly, "a").unwrap();
        assert!(recover_xtx_inverse(&diag, 1.0).is_err());
    }

    #[test]
    fn converters() {
        assert_eq!(bivariate_slope(0.0, 3.0, 2.0).unwrap(), 0.0);
        assert_eq!(bivariate_slope(1.0, 2.5, 2.5).unwrap(), 1.0);
        assert!((bivariate_slope(0.5, 4.0, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(bivariate_slope(0.5, 4.0, 0.0).is_err());
        assert_eq!(t_to_d(0.0, 10).unwrap(), 0.0);
        assert!((t_to_d(2.0, 4).unwrap() - 2.0).abs() < 1e-15);
        assert!((t_to_d(3.0, 100).unwrap() - 0.6).abs() < 1e-15);
        assert!(t_to_d(1.0, 0).is_err());
    }

    #[test]
    fn default_dfe_is_n_minus_coefficients() {
        assert_eq!(school_one().error_df(), 61);
        assert_eq!(school_one().with_dfe(50).error_df(), 50);
    }
}
