//! Report types shared by the command-line front end, with JSON and
//! plain-text renderings.
//!
//! JSON carries full precision. Text renders every number at six
//! significant digits, so the two always agree to that precision.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::design::Mode;
use crate::error::{Error, Result};
use crate::oracle::{EquivalenceReport, MonteCarloReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub label: String,
    pub estimate: f64,
    pub variance: f64,
    pub z: f64,
    pub p: f64,
    /// Lower and upper `1 - alpha` confidence limits.
    pub ci: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub stat: f64,
    pub df: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyProvenance {
    pub study: String,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub condition_number: f64,
    pub pooled_mse: Option<f64>,
    pub cochran_c: Option<f64>,
    pub f_max: Option<f64>,
    /// Monte Carlo p-values for the two variance checks, when requested.
    pub cochran_c_p: Option<f64>,
    pub f_max_p: Option<f64>,
    pub group_sizes: Vec<usize>,
    pub warnings: Vec<String>,
    pub provenance: Vec<StudyProvenance>,
}

/// Output of `synthesize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub method: Mode,
    pub alpha: f64,
    pub slopes_only: bool,
    pub studies: usize,
    pub params: Vec<ParamReport>,
    pub covariance: Vec<Vec<f64>>,
    pub correlation: Vec<Vec<f64>>,
    pub q_e: StatReport,
    /// Slopes-only homogeneity, present when intercept rows were synthesized.
    pub q_e_slopes_only: Option<StatReport>,
    pub q_b: StatReport,
    pub q_b_slopes_only: Option<StatReport>,
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Output of any subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Report {
    Synthesis(SynthesisReport),
    Simulation(MonteCarloReport),
    Verification(VerificationReport),
}

/// Output of `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub source: String,
    pub equivalence: EquivalenceReport,
    pub levene: Option<StatLevene>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatLevene {
    pub stat: f64,
    pub df1: usize,
    pub df2: usize,
    pub p: f64,
}

/// Formats `v` with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    // the exponent after rounding to six digits, so 9.999997 moves up a decade
    let sci = format!("{v:.5e}");
    let exp: i32 = sci[sci.find('e').expect("exponent present") + 1..].parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        format!("{v:.decimals$}")
    } else {
        sci
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(sig6).unwrap_or_else(|| "n/a".into())
}

fn stat_line(out: &mut String, name: &str, s: &StatReport) {
    let _ = writeln!(out, "{name:<18} {:>12}  df = {:<4}  p = {}", sig6(s.stat), s.df, sig6(s.p));
}

fn matrix(out: &mut String, title: &str, labels: &[String], m: &[Vec<f64>]) {
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:<14}", "");
    for l in labels {
        let _ = write!(out, " {l:>13}");
    }
    out.push('\n');
    for (label, row) in labels.iter().zip(m) {
        let _ = write!(out, "{label:<14}");
        for v in row {
            let _ = write!(out, " {:>13}", sig6(*v));
        }
        out.push('\n');
    }
}

impl SynthesisReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let level = sig6(100.0 * (1.0 - self.alpha));
        let _ = writeln!(out, "method: {}   studies: {}   alpha: {}", self.method, self.studies, sig6(self.alpha));
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<14} {:>13} {:>13} {:>13} {:>13} {:>13} {:>13}",
            "parameter", "estimate", "variance", "z", "p", "ci_low", "ci_high"
        );
        for p in &self.params {
            let _ = writeln!(
                out,
                "{:<14} {:>13} {:>13} {:>13} {:>13} {:>13} {:>13}",
                p.label,
                sig6(p.estimate),
                sig6(p.variance),
                sig6(p.z),
                sig6(p.p),
                sig6(p.ci[0]),
                sig6(p.ci[1])
            );
        }
        let _ = writeln!(out, "({level}% confidence intervals)");
        out.push('\n');
        let labels: Vec<String> = self.params.iter().map(|p| p.label.clone()).collect();
        matrix(&mut out, "covariance", &labels, &self.covariance);
        out.push('\n');
        matrix(&mut out, "correlation", &labels, &self.correlation);
        out.push('\n');
        stat_line(&mut out, "Q_E", &self.q_e);
        if let Some(q) = &self.q_e_slopes_only {
            stat_line(&mut out, "Q_E (slopes only)", q);
        }
        stat_line(&mut out, "Q_B", &self.q_b);
        if let Some(q) = &self.q_b_slopes_only {
            stat_line(&mut out, "Q_B (slopes only)", q);
        }
        out.push('\n');
        let d = &self.diagnostics;
        let _ = writeln!(out, "condition number   {}", sig6(d.condition_number));
        let _ = writeln!(out, "pooled MSE         {}", opt(d.pooled_mse));
        let _ = writeln!(out, "Cochran's C        {}", opt(d.cochran_c));
        if let Some(p) = d.cochran_c_p {
            let _ = writeln!(out, "  Monte Carlo p    {}", sig6(p));
        }
        let _ = writeln!(out, "F_max              {}", opt(d.f_max));
        if let Some(p) = d.f_max_p {
            let _ = writeln!(out, "  Monte Carlo p    {}", sig6(p));
        }
        let sizes: Vec<String> = d.group_sizes.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "group sizes        {}", sizes.join(" "));
        if !d.provenance.is_empty() {
            let _ = writeln!(out, "covariance source:");
            for p in &d.provenance {
                let _ = writeln!(out, "  study {}: {}", p.study, p.provenance);
            }
        }
        for w in &d.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

fn simulation_text(r: &MonteCarloReport) -> String {
    let mut out = String::new();
    let covariance = match r.covariance {
        crate::oracle::CovarianceSource::Estimated => "estimated",
        crate::oracle::CovarianceSource::Known => "known",
    };
    let _ = writeln!(
        out,
        "replications: {}   seed: {}   alpha: {}   covariance: {covariance}",
        r.replications,
        r.seed,
        sig6(r.alpha)
    );
    for m in &r.methods {
        out.push('\n');
        let _ = writeln!(out, "method: {}   failed replications: {}", m.method, m.failures);
        let _ = writeln!(
            out,
            "{:<12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "parameter", "truth", "mean", "bias", "emp_var", "model_var", "ratio", "ratio_se", "coverage"
        );
        for p in &m.params {
            let _ = writeln!(
                out,
                "{:<12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
                p.label,
                sig6(p.truth),
                sig6(p.mean_estimate),
                sig6(p.bias),
                sig6(p.empirical_variance),
                sig6(p.mean_model_variance),
                sig6(p.variance_ratio),
                sig6(p.variance_ratio_se),
                sig6(p.coverage)
            );
        }
        let _ = writeln!(
            out,
            "rejection rates: Q_E {}  Q_E (slopes only) {}  Q_B {}  Q_B (slopes only) {}",
            sig6(m.q_e_rejection),
            sig6(m.q_e_slopes_only_rejection),
            sig6(m.q_b_rejection),
            sig6(m.q_b_slopes_only_rejection)
        );
    }
    out
}

fn verification_text(r: &VerificationReport) -> String {
    let e = &r.equivalence;
    let mut out = String::new();
    let _ = writeln!(out, "{}: {} (studies {}, cases {})", if e.pass { "PASS" } else { "FAIL" }, r.source, e.studies, e.cases);
    let _ = writeln!(out, "max coefficient discrepancy  {}", sig6(e.max_coefficient_discrepancy));
    let _ = writeln!(out, "max covariance discrepancy   {}", sig6(e.max_covariance_discrepancy));
    let _ = writeln!(out, "pooled MSE                   {}", sig6(e.pooled_mse));
    let _ = writeln!(out, "full-sample MSE              {}", sig6(e.full_sample_mse));
    let _ = writeln!(out, "scale ratio                  {}", sig6(e.scale_ratio));
    let _ = writeln!(out, "{:<6} {:>16} {:>16}", "coef", "synthesized", "pooled sample");
    for (j, (a, b)) in e.synthesized.iter().zip(&e.pooled_sample).enumerate() {
        let _ = writeln!(out, "{j:<6} {:>16} {:>16}", sig6(*a), sig6(*b));
    }
    if let Some(l) = &r.levene {
        let _ = writeln!(out, "Levene F = {}  df = ({}, {})  p = {}", sig6(l.stat), l.df1, l.df2, sig6(l.p));
    }
    out
}

impl Report {
    pub fn to_text(&self) -> String {
        match self {
            Report::Synthesis(r) => r.to_text(),
            Report::Simulation(r) => simulation_text(r),
            Report::Verification(r) => verification_text(r),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))
    }

    /// Whether the command's own check passed; only `verify` can fail here.
    pub fn passed(&self) -> bool {
        match self {
            Report::Verification(r) => r.equivalence.pass,
            _ => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(12.824512), "12.8245");
        assert_eq!(sig6(-0.1107672), "-0.110767");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(1.5e-7), "1.50000e-7");
        assert_eq!(sig6(2.5e9), "2.50000e9");
        assert_eq!(sig6(9.9999997), "10.0000");
        assert_eq!(sig6(999999.7), "1.00000e6");
    }

    #[test]
    fn six_digits_round_trip_within_precision() {
        for v in [3.14159265, -2.718281828e-3, 987654.321, 1e-12, 4.2e11, 0.5] {
            let back: f64 = sig6(v).parse().unwrap();
            assert!((back - v).abs() <= 5e-6 * v.abs(), "{v} -> {}", sig6(v));
        }
    }
}
