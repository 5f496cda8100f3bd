//! Command-line surface: argument definitions and the three workflows.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::design::{build_system, BuildOptions, Mode};
use crate::error::{Error, Result};
use crate::estimators::{gls_estimate, pooled_gls_estimate, pooled_gls_estimate_from_studies, pooled_mse};
use crate::inference::{cochran_c, confidence_interval, f_max, q_b, q_e, z_test, TestResult};
use crate::io::{
    read_raw_csv, Diagnostics, InputFormat, ParamReport, Report, StatLevene, StatReport, StudyFile, StudyProvenance,
    SynthesisReport, VerificationReport,
};
use crate::oracle::{
    generate, levene_test, run_monte_carlo, study_residuals, variance_check_p_values, verify_equivalence,
    CovarianceSource, MonteCarloConfig, SimConfig,
};

#[derive(Debug, Parser)]
#[command(name = "slope-synth", version, about = "Fixed-effects synthesis of regression slopes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the studies in a JSON or CSV file.
    Synthesize(SynthesizeArgs),
    /// Monte Carlo calibration on simulated studies.
    Simulate(SimulateArgs),
    /// Check synthesis against one OLS fit on the pooled raw data.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Gls,
    Wls,
    Pooled,
}

impl From<Method> for Mode {
    fn from(m: Method) -> Self {
        match m {
            Method::Gls => Mode::Gls,
            Method::Wls => Mode::WlsDiagonal,
            Method::Pooled => Mode::PooledMse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FileFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    PaperShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum SigmaPattern {
    #[default]
    Common,
    Unequal,
}

#[derive(Debug, Clone, Args)]
pub struct SynthesizeArgs {
    /// Study file.
    pub file: PathBuf,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FileFormat>,
    #[arg(long, value_enum, default_value = "gls")]
    pub method: Method,
    /// Common correlation for studies reporting standard errors only.
    #[arg(long, num_args = 0..=1, default_missing_value = "0.2")]
    pub corr_fill: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Drop intercepts from the synthesis and use the slopes-only Q_E.
    #[arg(long)]
    pub slopes_only: bool,
    #[arg(long, value_enum, default_value = "text")]
    pub report: ReportFormat,
    /// Pooled MSE to use with `--method pooled` instead of pooling the studies.
    #[arg(long)]
    pub pooled_mse: Option<f64>,
    /// Monte Carlo replications for p-values of Cochran's C and F_max.
    #[arg(long)]
    pub variance_p_reps: Option<usize>,
    /// Seed for `--variance-p-reps`.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "paper-shape")]
    pub preset: Preset,
    #[arg(long, value_enum, default_value = "common")]
    pub sigma: SigmaPattern,
    /// Build covariance blocks from the true error variances.
    #[arg(long)]
    pub known_sigma: bool,
    /// Set every true coefficient to zero.
    #[arg(long)]
    pub null_beta: bool,
    #[arg(long, default_value_t = 2000)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "gls,wls,pooled")]
    pub methods: Vec<Method>,
    #[arg(long, value_enum, default_value = "text")]
    pub report: ReportFormat,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Generate data from a preset (the default when `--data` is absent).
    #[arg(long, value_enum, conflicts_with = "data")]
    pub preset: Option<Preset>,
    /// Case-level CSV with columns `study`, `y` and the predictors.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "text")]
    pub report: ReportFormat,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("--alpha must lie in (0, 1), got {alpha}")))
    }
}

fn stat(t: &TestResult) -> StatReport {
    StatReport {
        stat: t.statistic,
        df: t.df.unwrap_or(0),
        p: t.p_value.unwrap_or(f64::NAN),
    }
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn run_synthesize(args: &SynthesizeArgs) -> Result<Report> {
    check_alpha(args.alpha)?;
    let format = match args.format {
        Some(FileFormat::Json) => InputFormat::Json,
        Some(FileFormat::Csv) => InputFormat::Csv,
        None => InputFormat::from_path(&args.file),
    };
    let file = StudyFile::read(&args.file, format)?;
    synthesize_file(&file, args)
}

/// Synthesis on an already parsed study file.
pub fn synthesize_file(file: &StudyFile, args: &SynthesizeArgs) -> Result<Report> {
    check_alpha(args.alpha)?;
    let mode = Mode::from(args.method);
    if args.pooled_mse.is_some() && mode != Mode::PooledMse {
        return Err(Error::Validation("--pooled-mse applies only to --method pooled".into()));
    }
    let options = BuildOptions {
        slopes_only: args.slopes_only,
        corr_fill: args.corr_fill,
    };
    let system = build_system(&file.studies, &file.catalog, &file.moderators, mode, options)?;
    let result = match (mode, args.pooled_mse) {
        (Mode::PooledMse, Some(s)) => pooled_gls_estimate(&system, s)?,
        (Mode::PooledMse, None) => pooled_gls_estimate_from_studies(&system)?,
        _ => gls_estimate(&system)?,
    };

    let mut params = Vec::with_capacity(result.beta_hat.len());
    for (p, label) in result.param_labels.iter().enumerate() {
        let variance = result.variance(p);
        let z = z_test(result.beta_hat[p], variance).map_err(|e| Error::Validation(format!("parameter {label}: {e}")))?;
        let (lo, hi) = confidence_interval(result.beta_hat[p], variance, args.alpha)?;
        params.push(ParamReport {
            label: label.clone(),
            estimate: result.beta_hat[p],
            variance,
            z: z.statistic,
            p: z.p_value.unwrap_or(f64::NAN),
            ci: [lo, hi],
        });
    }

    let homogeneity = q_e(&system, &result, false)?;
    let q_e_slopes_only = if system.has_intercept_rows() {
        Some(stat(&q_e(&system, &result, true)?.test))
    } else {
        None
    };
    let q_b_slopes_only = match result.intercept_param {
        Some(_) if result.beta_hat.len() > 1 => Some(stat(&q_b(&result, true)?)),
        _ => None,
    };

    let mses: Option<Vec<f64>> = file.studies.iter().map(|s| s.mse).collect();
    let dfes: Vec<usize> = file.studies.iter().map(|s| s.error_df()).collect();
    let (cochran, fmax, pooled) = match &mses {
        Some(m) if m.len() >= 2 => (
            Some(cochran_c(m)?.statistic),
            Some(f_max(m)?.statistic),
            result.pooled_mse.or(pooled_mse(&dfes, m).ok()),
        ),
        _ => (None, None, result.pooled_mse),
    };
    let (variance_p, seed) = match (args.variance_p_reps, &mses) {
        (Some(reps), Some(m)) if m.len() >= 2 => {
            let (pc, pf) = variance_check_p_values(&dfes, m, reps, args.seed)?;
            ((Some(pc), Some(pf)), Some(args.seed))
        }
        (Some(_), _) => {
            return Err(Error::Validation(
                "--variance-p-reps needs an MSE from at least two studies".into(),
            ))
        }
        _ => ((None, None), None),
    };
    let mut warnings = file.warnings.clone();
    for w in &result.warnings {
        if !warnings.contains(w) {
            warnings.push(w.clone());
        }
    }
    let provenance = system
        .study_ids()
        .iter()
        .zip(system.provenance())
        .map(|(id, p)| StudyProvenance {
            study: id.clone(),
            provenance: p.to_string(),
        })
        .collect();

    Ok(Report::Synthesis(SynthesisReport {
        method: mode,
        alpha: args.alpha,
        slopes_only: system.is_slopes_only(),
        studies: system.study_count(),
        params,
        covariance: rows(&result.cov_beta),
        correlation: rows(&result.correlation()),
        q_e: stat(&homogeneity.test),
        q_e_slopes_only,
        q_b: stat(&q_b(&result, false)?),
        q_b_slopes_only,
        diagnostics: Diagnostics {
            condition_number: result.condition_number,
            pooled_mse: pooled,
            cochran_c: cochran,
            f_max: fmax,
            cochran_c_p: variance_p.0,
            f_max_p: variance_p.1,
            group_sizes: file.studies.iter().map(|s| s.n).collect(),
            warnings,
            provenance,
        },
        seed,
    }))
}

fn preset_config(preset: Preset, sigma: SigmaPattern, seed: u64) -> SimConfig {
    match (preset, sigma) {
        (Preset::PaperShape, SigmaPattern::Common) => SimConfig::paper_shape(seed),
        (Preset::PaperShape, SigmaPattern::Unequal) => SimConfig::paper_shape_unequal(seed),
    }
}

pub fn run_simulate(args: &SimulateArgs) -> Result<Report> {
    check_alpha(args.alpha)?;
    if args.methods.is_empty() {
        return Err(Error::Validation("--methods must name at least one method".into()));
    }
    let mut sim = preset_config(args.preset, args.sigma, args.seed);
    if args.null_beta {
        sim.beta.iter_mut().for_each(|b| *b = 0.0);
    }
    let mut config = MonteCarloConfig::new(sim, args.reps);
    config.alpha = args.alpha;
    config.covariance = if args.known_sigma {
        CovarianceSource::Known
    } else {
        CovarianceSource::Estimated
    };
    config.methods = args.methods.iter().map(|&m| m.into()).collect();
    Ok(Report::Simulation(run_monte_carlo(&config)?))
}

pub fn run_verify(args: &VerifyArgs) -> Result<Report> {
    let (data, source, seed) = match &args.data {
        Some(path) => (read_raw_csv(std::fs::File::open(path)?)?, path.display().to_string(), None),
        None => {
            let preset = args.preset.unwrap_or(Preset::PaperShape);
            let config = preset_config(preset, SigmaPattern::Common, args.seed);
            (generate(&config)?, "paper-shape preset".to_string(), Some(args.seed))
        }
    };
    let equivalence = verify_equivalence(&data)?;
    let levene = study_residuals(&data, &[])
        .and_then(|groups| levene_test(&groups))
        .ok()
        .map(|t| StatLevene {
            stat: t.statistic,
            df1: t.df.unwrap_or(0),
            df2: t.df2.unwrap_or(0),
            p: t.p_value.unwrap_or(f64::NAN),
        });
    Ok(Report::Verification(VerificationReport {
        seed,
        source,
        equivalence,
        levene,
    }))
}

pub fn report_format(command: &Command) -> ReportFormat {
    match command {
        Command::Synthesize(a) => a.report,
        Command::Simulate(a) => a.report,
        Command::Verify(a) => a.report,
    }
}

/// Runs a parsed command line and returns the rendered report.
pub fn execute(cli: &Cli) -> Result<(Report, String)> {
    let report = match &cli.command {
        Command::Synthesize(a) => run_synthesize(a)?,
        Command::Simulate(a) => run_simulate(a)?,
        Command::Verify(a) => run_verify(a)?,
    };
    let rendered = match report_format(&cli.command) {
        ReportFormat::Text => report.to_text(),
        ReportFormat::Json => report.to_json()?,
    };
    Ok((report, rendered))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DEFAULT_CORR_FILL;

    #[test]
    fn corr_fill_flag_default_matches_model() {
        let cli = Cli::try_parse_from(["slope-synth", "synthesize", "f.json", "--corr-fill"]).unwrap();
        match cli.command {
            Command::Synthesize(a) => assert_eq!(a.corr_fill, Some(DEFAULT_CORR_FILL)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn methods_list_parses() {
        let cli = Cli::try_parse_from(["slope-synth", "simulate", "--methods", "gls,pooled", "--reps", "10"]).unwrap();
        match cli.command {
            Command::Simulate(a) => assert_eq!(a.methods, vec![Method::Gls, Method::Pooled]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn verify_rejects_preset_with_data() {
        assert!(Cli::try_parse_from(["slope-synth", "verify", "--preset", "paper-shape", "--data", "x.csv"]).is_err());
    }
}
