//! Study-file ingestion.
//!
//! JSON is the full-fidelity format. A document looks like
//!
//! ```json
//! {
//!   "catalog": ["intercept", "math", "reading"],
//!   "intercept": true,
//!   "studies": [
//!     {
//!       "id": "1", "n": 64, "mse": 17.46,
//!       "coefficients": {"intercept": 5.470, "math": 0.219, "reading": 0.260},
//!       "cov": {"full": [[1.9340, -0.0648, -0.0302], [0.0058, -0.0043], [0.0098]]},
//!       "features": {"urban": true}
//!     }
//!   ],
//!   "moderators": [{"name": "urban_math", "target": "math", "when": "urban"}]
//! }
//! ```
//!
//! Covariance rows follow catalog order restricted to the coefficients the
//! study reports. Matrices may be given in full or as an upper triangle.
//! `cov` holds exactly one of `full`, `se` (optionally with `rho`) or
//! `xtx_inverse`; the last needs the study's `mse`.
//!
//! CSV covers the single-slope weighted workflow only: one row per study
//! with `study_id`, `slope`, `se` or `variance`, and `n`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{FeatureCondition, ModeratorSpec};
use crate::error::{Error, Result};
use crate::model::{validate_studies, CovSpec, PredictorCatalog, StudyRegression};

/// Label of the single coefficient in CSV input.
pub const CSV_SLOPE_LABEL: &str = "slope";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Json,
    Csv,
}

impl InputFormat {
    /// Guesses the format from a file extension, defaulting to JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::Json,
        }
    }
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(InputFormat::Json),
            "csv" => Ok(InputFormat::Csv),
            other => Err(Error::Validation(format!("unknown input format '{other}'"))),
        }
    }
}

/// A parsed study file: catalog, studies and moderators.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyFile {
    pub catalog: PredictorCatalog,
    pub studies: Vec<StudyRegression>,
    pub moderators: Vec<ModeratorSpec>,
    /// Non-fatal findings from validation.
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    catalog: Vec<String>,
    #[serde(default = "yes")]
    intercept: bool,
    studies: Vec<StudyRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    moderators: Vec<ModeratorRecord>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyRecord {
    id: String,
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dfe: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mse: Option<f64>,
    coefficients: BTreeMap<String, f64>,
    cov: CovRecord,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    features: BTreeMap<String, bool>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CovRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    full: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    se: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    xtx_inverse: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeratorRecord {
    name: String,
    target: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    when: String,
}

/// Reads a full or upper-triangular square matrix of dimension `dim`.
fn square_matrix(rows: &[Vec<f64>], dim: usize, path: &str) -> Result<DMatrix<f64>> {
    if rows.len() != dim {
        return Err(Error::parse(path, format!("expected {dim} rows, found {}", rows.len())));
    }
    let full = rows.iter().all(|r| r.len() == dim);
    let upper = rows.iter().enumerate().all(|(i, r)| r.len() == dim - i);
    if !full && !upper {
        return Err(Error::parse(path, "rows must all have full length or form an upper triangle"));
    }
    let mut m = DMatrix::zeros(dim, dim);
    for (i, row) in rows.iter().enumerate() {
        let offset = if full { 0 } else { i };
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::parse(format!("{path}[{i}][{j}]"), "entry is not finite"));
            }
            m[(i, j + offset)] = v;
            if !full {
                m[(j + offset, i)] = v;
            }
        }
    }
    Ok(m)
}

fn cov_spec(record: &CovRecord, dim: usize, mse: Option<f64>, path: &str) -> Result<CovSpec> {
    let given = [record.full.is_some(), record.se.is_some(), record.xtx_inverse.is_some()];
    if given.iter().filter(|&&g| g).count() != 1 {
        return Err(Error::parse(path, "exactly one of 'full', 'se' or 'xtx_inverse' is required"));
    }
    if record.rho.is_some() && record.se.is_none() {
        return Err(Error::parse(format!("{path}.rho"), "'rho' only applies together with 'se'"));
    }
    if let Some(rows) = &record.full {
        return Ok(CovSpec::Full(square_matrix(rows, dim, &format!("{path}.full"))?));
    }
    if let Some(rows) = &record.xtx_inverse {
        let mse = mse.ok_or_else(|| Error::parse(format!("{path}.xtx_inverse"), "requires the study's 'mse'"))?;
        return Ok(CovSpec::XtXInverseWithMse(square_matrix(rows, dim, &format!("{path}.xtx_inverse"))?, mse));
    }
    let se = record.se.as_ref().expect("one source is present");
    if se.len() != dim {
        return Err(Error::parse(format!("{path}.se"), format!("expected {dim} entries, found {}", se.len())));
    }
    let se = DVector::from_column_slice(se);
    Ok(match record.rho {
        Some(rho) => CovSpec::StandardErrorsWithCommonCorr(se, rho),
        None => CovSpec::StandardErrors(se),
    })
}

fn study_from_record(record: &StudyRecord, catalog: &PredictorCatalog, path: &str) -> Result<StudyRegression> {
    if record.id.trim().is_empty() {
        return Err(Error::parse(format!("{path}.id"), "study id must be non-empty"));
    }
    let mut coefficients = Vec::with_capacity(record.coefficients.len());
    for (label, &value) in &record.coefficients {
        let index = catalog.index_of(label).ok_or_else(|| {
            Error::parse(format!("{path}.coefficients.{label}"), "label is not in the catalog")
        })?;
        coefficients.push((index, value));
    }
    if coefficients.is_empty() {
        return Err(Error::parse(format!("{path}.coefficients"), "at least one coefficient required"));
    }
    coefficients.sort_by_key(|&(i, _)| i);
    let cov = cov_spec(&record.cov, coefficients.len(), record.mse, &format!("{path}.cov"))?;
    let mut study = StudyRegression::new(record.id.clone(), record.n, &coefficients, cov);
    study.mse = record.mse;
    study.dfe = record.dfe;
    study.features = record.features.clone();
    Ok(study)
}

fn document_to_file(doc: Document) -> Result<StudyFile> {
    let catalog = PredictorCatalog::new(doc.catalog, doc.intercept).map_err(|e| Error::parse("catalog", e.to_string()))?;
    if doc.studies.is_empty() {
        return Err(Error::parse("studies", "at least one study required"));
    }
    let studies = doc
        .studies
        .iter()
        .enumerate()
        .map(|(i, r)| study_from_record(r, &catalog, &format!("studies[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let mut moderators = Vec::with_capacity(doc.moderators.len());
    for (i, m) in doc.moderators.iter().enumerate() {
        let path = format!("moderators[{i}]");
        let target = catalog
            .index_of(&m.target)
            .ok_or_else(|| Error::parse(format!("{path}.target"), format!("'{}' is not in the catalog", m.target)))?;
        let when = if m.when.trim().is_empty() {
            FeatureCondition::default()
        } else {
            m.when.parse().map_err(|e: Error| Error::parse(format!("{path}.when"), e.to_string()))?
        };
        moderators.push(ModeratorSpec::new(m.name.clone(), target, when));
    }
    let warnings = validate_studies(&studies, &catalog).into_result()?;
    Ok(StudyFile { catalog, studies, moderators, warnings })
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl StudyFile {
    /// Parses a JSON study file. Schema errors name the offending field.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let doc: Document = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let path = if path == "." { "document".to_string() } else { path };
            Error::parse(path, format!("{inner}"))
        })?;
        document_to_file(doc)
    }

    /// Parses single-slope CSV input into studies of one coefficient each.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::parse("header", e.to_string()))?.clone();
        let mut columns: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, h) in headers.iter().enumerate() {
            let lower = h.to_ascii_lowercase();
            if lower.contains("cov") || lower.contains("corr") || lower == "rho" {
                return Err(Error::Unsupported(format!(
                    "CSV column '{h}' carries covariance data; use the JSON format for multi-coefficient studies"
                )));
            }
            let key = match lower.as_str() {
                "study_id" => "study_id",
                "slope" => "slope",
                "se" => "se",
                "variance" => "variance",
                "n" => "n",
                _ => return Err(Error::parse("header", format!("unexpected column '{h}'"))),
            };
            if columns.insert(key, i).is_some() {
                return Err(Error::parse("header", format!("duplicate column '{h}'")));
            }
        }
        for required in ["study_id", "slope", "n"] {
            if !columns.contains_key(required) {
                return Err(Error::parse("header", format!("missing column '{required}'")));
            }
        }
        let spread = match (columns.get("se"), columns.get("variance")) {
            (Some(&i), None) => (i, true),
            (None, Some(&i)) => (i, false),
            _ => return Err(Error::parse("header", "exactly one of 'se' or 'variance' is required")),
        };
        let catalog = PredictorCatalog::without_intercept([CSV_SLOPE_LABEL])?;
        let mut studies = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let line = row + 2;
            let record = record.map_err(|e| Error::parse(format!("line {line}"), e.to_string()))?;
            let field = |name: &str, idx: usize| -> Result<&str> {
                record
                    .get(idx)
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| Error::parse(format!("line {line}.{name}"), "value missing"))
            };
            let number = |name: &str, idx: usize| -> Result<f64> {
                let raw = field(name, idx)?;
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(format!("line {line}.{name}"), format!("'{raw}' is not a number")))
            };
            let id = field("study_id", columns["study_id"])?.to_string();
            let slope = number("slope", columns["slope"])?;
            let raw_n = field("n", columns["n"])?;
            let n: usize = raw_n
                .parse()
                .map_err(|_| Error::parse(format!("line {line}.n"), format!("'{raw_n}' is not a sample size")))?;
            let (idx, is_se) = spread;
            let value = number(if is_se { "se" } else { "variance" }, idx)?;
            let variance = if is_se { value * value } else { value };
            let cov = CovSpec::Full(DMatrix::from_element(1, 1, variance));
            studies.push(StudyRegression::new(id, n, &[(0, slope)], cov));
        }
        if studies.is_empty() {
            return Err(Error::parse("studies", "at least one study required"));
        }
        let warnings = validate_studies(&studies, &catalog).into_result()?;
        Ok(StudyFile {
            catalog,
            studies,
            moderators: Vec::new(),
            warnings,
        })
    }

    pub fn read(path: &Path, format: InputFormat) -> Result<Self> {
        match format {
            InputFormat::Json => Self::from_json_str(&std::fs::read_to_string(path)?),
            InputFormat::Csv => Self::from_csv_reader(std::fs::File::open(path)?),
        }
    }

    /// Serializes to the JSON schema accepted by [`StudyFile::from_json_str`].
    pub fn to_json_string(&self) -> Result<String> {
        let label = |i: usize| self.catalog.name(i).expect("labels index the catalog").to_string();
        let studies = self
            .studies
            .iter()
            .map(|s| {
                let cov = match &s.cov {
                    CovSpec::Full(m) => CovRecord { full: Some(matrix_rows(m)), ..Default::default() },
                    CovSpec::XtXInverseWithMse(m, _) => CovRecord {
                        xtx_inverse: Some(matrix_rows(m)),
                        ..Default::default()
                    },
                    CovSpec::StandardErrors(se) => CovRecord { se: Some(se.iter().copied().collect()), ..Default::default() },
                    CovSpec::StandardErrorsWithCommonCorr(se, rho) => CovRecord {
                        se: Some(se.iter().copied().collect()),
                        rho: Some(*rho),
                        ..Default::default()
                    },
                };
                let mse = match &s.cov {
                    CovSpec::XtXInverseWithMse(_, mse) => Some(*mse),
                    _ => s.mse,
                };
                StudyRecord {
                    id: s.id.clone(),
                    n: s.n,
                    dfe: s.dfe,
                    mse,
                    coefficients: s.labels.iter().zip(s.slopes.iter()).map(|(&l, &v)| (label(l), v)).collect(),
                    cov,
                    features: s.features.clone(),
                }
            })
            .collect();
        let moderators = self
            .moderators
            .iter()
            .map(|m| ModeratorRecord {
                name: m.name.clone(),
                target: label(m.target),
                when: m.when.to_string(),
            })
            .collect();
        let doc = Document {
            catalog: self.catalog.names().to_vec(),
            intercept: self.catalog.has_intercept(),
            studies,
            moderators,
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Validation(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHOOL_ONE: &str = r#"{
        "catalog": ["intercept", "ses", "prior"],
        "studies": [{
            "id": "1", "n": 64, "mse": 17.46,
            "coefficients": {"intercept": 5.470, "ses": 0.219, "prior": 0.260},
            "cov": {"full": [[1.9340, -0.0648, -0.0302], [0.0058, -0.0043], [0.0098]]}
        }]
    }"#;

    #[test]
    fn school_one_parses() {
        let file = StudyFile::from_json_str(SCHOOL_ONE).unwrap();
        assert_eq!(file.studies.len(), 1);
        let s = &file.studies[0];
        assert_eq!(s.labels, vec![0, 1, 2]);
        assert_eq!(s.slopes.as_slice(), &[5.470, 0.219, 0.260]);
        match &s.cov {
            CovSpec::Full(m) => {
                assert_eq!(m[(2, 0)], -0.0302);
                assert_eq!(m[(0, 2)], -0.0302);
            }
            other => panic!("{other:?}"),
        }
        assert!(file.warnings.is_empty(), "{:?}", file.warnings);
    }

    #[test]
    fn empty_studies_rejected() {
        let err = StudyFile::from_json_str(r#"{"catalog": ["x"], "intercept": false, "studies": []}"#).unwrap_err();
        assert!(err.to_string().contains("at least one study required"), "{err}");
    }

    #[test]
    fn errors_carry_field_paths() {
        let text = SCHOOL_ONE.replace("\"full\"", "\"fulll\"");
        let err = StudyFile::from_json_str(&text).unwrap_err();
        assert!(err.to_string().contains("studies[0].cov"), "{err}");

        let text = SCHOOL_ONE.replace("\"ses\": 0.219", "\"sex\": 0.219");
        let err = StudyFile::from_json_str(&text).unwrap_err();
        assert!(err.to_string().contains("studies[0].coefficients.sex"), "{err}");

        let text = SCHOOL_ONE.replace("[0.0098]", "[0.0098, 1.0]");
        let err = StudyFile::from_json_str(&text).unwrap_err();
        assert!(err.to_string().contains("studies[0].cov.full"), "{err}");
    }

    #[test]
    fn xtx_inverse_needs_mse() {
        let text = r#"{"catalog": ["x"], "intercept": false, "studies": [
            {"id": "a", "n": 10, "coefficients": {"x": 1.0}, "cov": {"xtx_inverse": [[0.5]]}}]}"#;
        let err = StudyFile::from_json_str(text).unwrap_err();
        assert!(err.to_string().contains("studies[0].cov.xtx_inverse"), "{err}");
    }

    #[test]
    fn csv_rows_become_single_slope_studies() {
        let text = "study_id,slope,se,n\nA,0.2,0.1,40\nB,0.3,0.2,55\nC,0.25,0.15,61\n";
        let file = StudyFile::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(file.studies.len(), 3);
        assert!(!file.catalog.has_intercept());
        match &file.studies[1].cov {
            CovSpec::Full(m) => assert!((m[(0, 0)] - 0.04).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_with_covariance_is_unsupported() {
        let text = "study_id,slope,se,n,cov_slope_x2\nA,0.2,0.1,40,0.01\n";
        assert!(matches!(StudyFile::from_csv_reader(text.as_bytes()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn csv_bad_number_names_line() {
        let text = "study_id,slope,variance,n\nA,0.2,0.01,40\nB,abc,0.02,30\n";
        let err = StudyFile::from_csv_reader(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3.slope"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let mut file = StudyFile::from_json_str(SCHOOL_ONE).unwrap();
        file.studies[0].features.insert("urban".into(), true);
        file.moderators.push(ModeratorSpec::new("urban_ses", 1, FeatureCondition::flag("urban")));
        let again = StudyFile::from_json_str(&file.to_json_string().unwrap()).unwrap();
        assert_eq!(again.studies, file.studies);
        assert_eq!(again.moderators, file.moderators);
        assert_eq!(again.catalog, file.catalog);
    }
}
