//! Assembly of the stacked synthesis system: stacked coefficients, the
//! block-diagonal weight matrix and the zero/one design matrix.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    recover_xtx_inverse, resolve_covariance_with_fill, validate_studies, PredictorCatalog, Provenance,
    StudyRegression,
};

/// Which weight matrix the system carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full resolved covariance blocks.
    Gls,
    /// Covariance blocks with off-diagonals zeroed.
    #[serde(rename = "wls")]
    WlsDiagonal,
    /// `(X_i'X_i)^{-1}` blocks, rescaled later by a pooled MSE.
    #[serde(rename = "pooled")]
    PooledMse,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Gls => "gls",
            Mode::WlsDiagonal => "wls",
            Mode::PooledMse => "pooled",
        })
    }
}

/// A conjunction of feature-flag literals such as `controls_prior && !urban`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureCondition {
    literals: Vec<(String, bool)>,
}

impl FeatureCondition {
    pub fn flag(name: impl Into<String>) -> Self {
        Self { literals: vec![(name.into(), true)] }
    }

    pub fn not(name: impl Into<String>) -> Self {
        Self { literals: vec![(name.into(), false)] }
    }

    pub fn and(mut self, other: FeatureCondition) -> Self {
        self.literals.extend(other.literals);
        self
    }

    pub fn flags(&self) -> impl Iterator<Item = &str> {
        self.literals.iter().map(|(n, _)| n.as_str())
    }

    /// Evaluates the condition; `Err` names the first flag the study lacks.
    pub fn evaluate(&self, study: &StudyRegression) -> std::result::Result<bool, String> {
        let mut holds = true;
        for (name, wanted) in &self.literals {
            match study.features.get(name) {
                Some(v) => holds &= *v == *wanted,
                None => return Err(name.clone()),
            }
        }
        Ok(holds)
    }
}

impl FromStr for FeatureCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut literals = Vec::new();
        for term in s.split("&&") {
            let term = term.trim();
            let (name, value) = match term.strip_prefix('!') {
                Some(rest) => (rest.trim(), false),
                None => (term, true),
            };
            let valid = !name.is_empty()
                && name.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-' || c == '.');
            if !valid {
                return Err(Error::Validation(format!("invalid feature expression '{s}'")));
            }
            literals.push((name.to_string(), value));
        }
        Ok(Self { literals })
    }
}

impl fmt::Display for FeatureCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, value)) in self.literals.iter().enumerate() {
            if i > 0 {
                f.write_str(" && ")?;
            }
            if !value {
                f.write_str("!")?;
            }
            f.write_str(name)?;
        }
        Ok(())
    }
}

/// An extra design column shifting one catalog coefficient in the studies
/// where a feature condition holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeratorSpec {
    pub name: String,
    pub target: usize,
    pub when: FeatureCondition,
}

impl ModeratorSpec {
    pub fn new(name: impl Into<String>, target: usize, when: FeatureCondition) -> Self {
        Self { name: name.into(), target, when }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BuildOptions {
    /// Drop intercept rows and the intercept parameter.
    pub slopes_only: bool,
    /// Common correlation used to fill off-diagonals of studies that only
    /// report standard errors.
    pub corr_fill: Option<f64>,
}

/// One row of the stacked system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLabel {
    pub study: usize,
    pub coefficient: usize,
}

/// The assembled synthesis problem `b = W beta + e`, `Cov(e)` block diagonal.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    b: DVector<f64>,
    blocks: Vec<DMatrix<f64>>,
    ranges: Vec<Range<usize>>,
    w: DMatrix<f64>,
    param_labels: Vec<String>,
    param_catalog: Vec<Option<usize>>,
    rows: Vec<RowLabel>,
    study_ids: Vec<String>,
    mses: Vec<Option<f64>>,
    dfes: Vec<usize>,
    provenance: Vec<Provenance>,
    mode: Mode,
    slopes_only: bool,
    has_intercept: bool,
    warnings: Vec<String>,
}

impl StackedSystem {
    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Per-study weight blocks: covariance blocks, or `(X_i'X_i)^{-1}` in
    /// pooled mode.
    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    /// Dense block-diagonal weight matrix.
    pub fn v(&self) -> DMatrix<f64> {
        block_diagonal(&self.blocks)
    }

    pub fn study_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn study_range(&self, study: usize) -> Range<usize> {
        self.ranges[study].clone()
    }

    pub fn b_block(&self, study: usize) -> DVector<f64> {
        self.b.rows_range(self.ranges[study].clone()).into_owned()
    }

    pub fn w_block(&self, study: usize) -> DMatrix<f64> {
        self.w.rows_range(self.ranges[study].clone()).into_owned()
    }

    pub fn param_labels(&self) -> &[String] {
        &self.param_labels
    }

    /// Catalog index behind each parameter; `None` for moderator columns.
    pub fn param_catalog(&self) -> &[Option<usize>] {
        &self.param_catalog
    }

    pub fn rows(&self) -> &[RowLabel] {
        &self.rows
    }

    pub fn study_ids(&self) -> &[String] {
        &self.study_ids
    }

    pub fn mses(&self) -> &[Option<f64>] {
        &self.mses
    }

    pub fn dfes(&self) -> &[usize] {
        &self.dfes
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_slopes_only(&self) -> bool {
        self.slopes_only
    }

    /// True when intercept rows are part of the stack.
    pub fn has_intercept_rows(&self) -> bool {
        self.has_intercept && !self.slopes_only
    }

    /// Column of the intercept parameter, when the intercept is stacked.
    pub fn intercept_param(&self) -> Option<usize> {
        if !self.has_intercept_rows() {
            return None;
        }
        self.param_catalog.iter().position(|&c| c == Some(0))
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn row_count(&self) -> usize {
        self.b.len()
    }

    pub fn param_count(&self) -> usize {
        self.w.ncols()
    }

    /// Projection onto the slope coefficients: intercept rows, the matching
    /// block rows/columns and the intercept parameter are deleted.
    pub fn without_intercept(&self) -> Result<StackedSystem> {
        if !self.has_intercept_rows() {
            return Ok(self.clone());
        }
        let keep_param: Vec<usize> = (0..self.param_count())
            .filter(|&j| self.param_catalog[j] != Some(0))
            .collect();
        let mut parts = Vec::with_capacity(self.study_count());
        for (i, range) in self.ranges.iter().enumerate() {
            let keep: Vec<usize> = (0..range.len())
                .filter(|&r| self.rows[range.start + r].coefficient != 0)
                .collect();
            parts.push(StudyPart {
                index: i,
                b: DVector::from_iterator(keep.len(), keep.iter().map(|&r| self.b[range.start + r])),
                block: self.blocks[i].select_rows(&keep).select_columns(&keep),
                w: self.w.rows_range(range.clone()).select_rows(&keep).select_columns(&keep_param),
                coefficients: keep.iter().map(|&r| self.rows[range.start + r].coefficient).collect(),
            });
        }
        let mut warnings = self.warnings.clone();
        let system = self.reassemble(parts, &keep_param, &mut warnings)?;
        Ok(StackedSystem { warnings, ..system })
    }

    fn reassemble(&self, parts: Vec<StudyPart>, keep_param: &[usize], warnings: &mut Vec<String>) -> Result<Self> {
        let mut b = Vec::new();
        let mut w_rows: Vec<DMatrix<f64>> = Vec::new();
        let mut blocks = Vec::new();
        let mut ranges = Vec::new();
        let mut rows = Vec::new();
        let mut study_ids = Vec::new();
        let mut mses = Vec::new();
        let mut dfes = Vec::new();
        let mut provenance = Vec::new();
        for part in parts {
            if part.b.is_empty() {
                warnings.push(format!(
                    "study {} has no slope coefficients and is dropped",
                    self.study_ids[part.index]
                ));
                continue;
            }
            let start = b.len();
            b.extend(part.b.iter().copied());
            ranges.push(start..b.len());
            let study = study_ids.len();
            rows.extend(part.coefficients.iter().map(|&c| RowLabel { study, coefficient: c }));
            blocks.push(part.block);
            w_rows.push(part.w);
            study_ids.push(self.study_ids[part.index].clone());
            mses.push(self.mses[part.index]);
            dfes.push(self.dfes[part.index]);
            provenance.push(self.provenance[part.index]);
        }
        let w = stack_rows(&w_rows, keep_param.len());
        let param_labels: Vec<String> = keep_param.iter().map(|&j| self.param_labels[j].clone()).collect();
        check_rank(&w, &param_labels)?;
        Ok(StackedSystem {
            b: DVector::from_vec(b),
            blocks,
            ranges,
            w,
            param_labels,
            param_catalog: keep_param.iter().map(|&j| self.param_catalog[j]).collect(),
            rows,
            study_ids,
            mses,
            dfes,
            provenance,
            mode: self.mode,
            slopes_only: true,
            has_intercept: self.has_intercept,
            warnings: Vec::new(),
        })
    }
}

struct StudyPart {
    index: usize,
    b: DVector<f64>,
    block: DMatrix<f64>,
    w: DMatrix<f64>,
    coefficients: Vec<usize>,
}

fn stack_rows(parts: &[DMatrix<f64>], ncols: usize) -> DMatrix<f64> {
    let nrows = parts.iter().map(|p| p.nrows()).sum();
    let mut w = DMatrix::zeros(nrows, ncols);
    let mut offset = 0;
    for p in parts {
        w.view_mut((offset, 0), (p.nrows(), ncols)).copy_from(p);
        offset += p.nrows();
    }
    w
}

fn check_rank(w: &DMatrix<f64>, labels: &[String]) -> Result<()> {
    let dependent = linalg::dependent_columns(w, linalg::RANK_TOL);
    if dependent.is_empty() {
        Ok(())
    } else {
        Err(Error::Unidentified(dependent.into_iter().map(|j| labels[j].clone()).collect()))
    }
}

/// Direct sum of square blocks.
pub fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut offset = 0;
    for block in blocks {
        let k = block.nrows();
        out.view_mut((offset, offset), (k, k)).copy_from(block);
        offset += k;
    }
    out
}

/// Stacks the studies into a synthesis system.
///
/// Studies are stacked in input order. Each study's design block is the
/// identity over catalog entries with rows removed for coefficients the
/// study does not report; moderator columns carry a 1 in the row of their
/// target coefficient for studies where their condition holds.
pub fn build_system(
    studies: &[StudyRegression],
    catalog: &PredictorCatalog,
    moderators: &[ModeratorSpec],
    mode: Mode,
    options: BuildOptions,
) -> Result<StackedSystem> {
    let mut warnings = validate_studies(studies, catalog).into_result()?;
    validate_moderators(moderators, catalog, studies)?;
    if let Some(rho) = options.corr_fill {
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::Domain(format!("common correlation {rho} outside (-1, 1)")));
        }
    }

    let mut params: Vec<usize> = (0..catalog.len()).collect();
    if options.slopes_only && catalog.has_intercept() {
        params.retain(|&j| j != 0);
    }
    let mut param_labels: Vec<String> = params.iter().map(|&j| catalog.names()[j].clone()).collect();
    let mut param_catalog: Vec<Option<usize>> = params.iter().map(|&j| Some(j)).collect();
    for m in moderators {
        param_labels.push(m.name.clone());
        param_catalog.push(None);
    }
    let ncols = param_labels.len();

    let mut parts = Vec::with_capacity(studies.len());
    let mut provenance = Vec::with_capacity(studies.len());
    for (index, study) in studies.iter().enumerate() {
        let cov = resolve_covariance_with_fill(study, options.corr_fill)?;
        provenance.push(cov.provenance());
        let block = match mode {
            Mode::Gls => cov.matrix().clone(),
            Mode::WlsDiagonal => DMatrix::from_diagonal(&cov.matrix().diagonal()),
            Mode::PooledMse => {
                let mse = study
                    .mse
                    .ok_or_else(|| Error::study(&study.id, "pooled-MSE synthesis requires the study MSE"))?;
                recover_xtx_inverse(&cov, mse).map_err(|e| Error::study(&study.id, e.to_string()))?
            }
        };
        let keep: Vec<usize> = (0..study.coefficient_count())
            .filter(|&r| !(options.slopes_only && catalog.is_intercept(study.labels[r])))
            .collect();
        let coefficients: Vec<usize> = keep.iter().map(|&r| study.labels[r]).collect();
        let mut w = DMatrix::zeros(keep.len(), ncols);
        for (row, &label) in coefficients.iter().enumerate() {
            let col = params.iter().position(|&p| p == label).expect("label validated against catalog");
            w[(row, col)] = 1.0;
            for (f, m) in moderators.iter().enumerate() {
                if m.target == label && m.when.evaluate(study).expect("moderator flags validated") {
                    w[(row, params.len() + f)] = 1.0;
                }
            }
        }
        parts.push(StudyPart {
            index,
            b: DVector::from_iterator(keep.len(), keep.iter().map(|&r| study.slopes[r])),
            block: block.select_rows(&keep).select_columns(&keep),
            w,
            coefficients,
        });
    }

    if mode == Mode::PooledMse {
        let signatures: BTreeSet<&Vec<usize>> = studies.iter().map(|s| &s.labels).collect();
        if signatures.len() > 1 {
            warnings.push(
                "pooled-MSE synthesis over studies fitting different models: the study MSEs may estimate different error variances"
                    .into(),
            );
        }
    }

    let template = StackedSystem {
        b: DVector::zeros(0),
        blocks: Vec::new(),
        ranges: Vec::new(),
        w: DMatrix::zeros(0, ncols),
        param_labels,
        param_catalog,
        rows: Vec::new(),
        study_ids: studies.iter().map(|s| s.id.clone()).collect(),
        mses: studies.iter().map(|s| s.mse).collect(),
        dfes: studies.iter().map(|s| s.error_df()).collect(),
        provenance,
        mode,
        slopes_only: options.slopes_only && catalog.has_intercept(),
        has_intercept: catalog.has_intercept(),
        warnings: Vec::new(),
    };
    let keep_param: Vec<usize> = (0..ncols).collect();
    let system = template.reassemble(parts, &keep_param, &mut warnings)?;
    Ok(StackedSystem {
        slopes_only: template.slopes_only,
        warnings,
        ..system
    })
}

fn validate_moderators(
    moderators: &[ModeratorSpec],
    catalog: &PredictorCatalog,
    studies: &[StudyRegression],
) -> Result<()> {
    let mut names = BTreeSet::new();
    for m in moderators {
        if m.name.trim().is_empty() {
            return Err(Error::Validation("moderator names must be non-empty".into()));
        }
        if !names.insert(m.name.as_str()) {
            return Err(Error::Validation(format!("duplicate moderator '{}'", m.name)));
        }
        if catalog.index_of(&m.name).is_some() {
            return Err(Error::Validation(format!("moderator '{}' clashes with a predictor name", m.name)));
        }
        if m.target >= catalog.len() {
            return Err(Error::Validation(format!(
                "moderator '{}' targets index {} outside the catalog",
                m.name, m.target
            )));
        }
        for s in studies {
            if let Err(flag) = m.when.evaluate(s) {
                return Err(Error::study(
                    &s.id,
                    format!("feature '{flag}' needed by moderator '{}' is missing", m.name),
                ));
            }
        }
    }
    Ok(())
}
