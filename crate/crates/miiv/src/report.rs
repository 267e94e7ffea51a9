//! Fit reports: estimation of every equation of a model against a dataset,
//! with provenance, JSON serialization and fixed-3-decimal text rendering.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::bma::{fit_equation_2sbma, BmaOptions, SubsetFit, SubsetSample};
use crate::dataset::Dataset;
use crate::equations::{equations_with_miivs, MiivConfig};
use crate::error::Result;
use crate::estimator::{fit_equation_2sls, VcovDenominator};
use crate::model::parse_model;

/// Which estimator a fit runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EstimatorChoice {
    #[serde(rename = "2sls")]
    TwoSls,
    #[default]
    #[serde(rename = "2sbma")]
    TwoSbma,
}

impl EstimatorChoice {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorChoice::TwoSls => "2sls",
            EstimatorChoice::TwoSbma => "2sbma",
        }
    }
}

/// Options of one `fit` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub estimator: EstimatorChoice,
    /// Significance level used for flagging in the report.
    pub alpha: f64,
    pub vcov: VcovDenominator,
    pub subset_cap: usize,
    pub subset_sample: Option<SubsetSample>,
    /// Include the full per-subset audit trail in the JSON output.
    pub audit_subsets: bool,
    pub miiv: MiivConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            estimator: EstimatorChoice::default(),
            alpha: 0.05,
            vcov: VcovDenominator::default(),
            subset_cap: 100_000,
            subset_sample: None,
            audit_subsets: false,
            miiv: MiivConfig::default(),
        }
    }
}

/// Everything needed to reproduce a fit: inputs by hash, configuration and
/// seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub model_path: String,
    pub model_sha256: String,
    pub data_path: String,
    pub data_sha256: String,
    pub estimator: String,
    pub alpha: f64,
    pub vcov: VcovDenominator,
    pub subset_cap: usize,
    pub subset_sample: Option<SubsetSample>,
    pub miiv_draws: usize,
    pub miiv_tolerance: f64,
    pub miiv_seed: u64,
    pub n_rows: usize,
    pub n_rows_dropped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SarganReport {
    pub stat: f64,
    pub df: usize,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BmaReport {
    pub bma_sargan_p: f64,
    pub significant: bool,
    pub n_subsets: usize,
    pub is_sargan_p: BTreeMap<String, f64>,
    pub inclusion: BTreeMap<String, f64>,
    pub weak_instruments: Vec<String>,
    pub ranked_suspects: Vec<String>,
    pub suspect_ties: bool,
    pub dropped_subsets: Vec<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset_fits: Option<Vec<SubsetFit>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquationReport {
    pub outcome: String,
    pub regressors: Vec<String>,
    pub miivs: Vec<String>,
    pub n: usize,
    pub coefficients: Vec<CoefficientReport>,
    pub first_stage_r2: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sargan: Option<SarganReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bma: Option<BmaReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub provenance: Provenance,
    pub equations: Vec<EquationReport>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Parse, transform, derive instruments and estimate every equation.
///
/// `model_path`/`data_path` are recorded verbatim in the provenance block;
/// hashing happens here so callers cannot desynchronize text and hash.
pub fn run_fit(
    model_text: &str,
    model_path: &str,
    data: &Dataset,
    data_bytes: &[u8],
    data_path: &str,
    opts: &FitOptions,
) -> Result<FitReport> {
    let ir = parse_model(model_text)?;
    let equations = equations_with_miivs(&ir, &opts.miiv)?;

    let mut referenced: Vec<String> = ir.observed.clone();
    referenced.sort();
    let (complete, dropped) = data.listwise_complete(&referenced)?;
    if dropped > 0 {
        log::warn!("dropped {dropped} row(s) with missing values among referenced variables");
    }

    let mut reports = Vec::new();
    for eq in &equations {
        let report = match opts.estimator {
            EstimatorChoice::TwoSls => {
                let fitted = fit_equation_2sls(eq, &complete, opts.vcov)?;
                let coefficients = fitted
                    .coef_names
                    .iter()
                    .zip(fitted.estimate.theta.iter().zip(fitted.estimate.se.iter()))
                    .map(|(name, (est, se))| CoefficientReport {
                        name: name.clone(),
                        estimate: *est,
                        se: *se,
                    })
                    .collect();
                EquationReport {
                    outcome: eq.outcome.clone(),
                    regressors: eq.regressors.clone(),
                    miivs: eq.miivs.clone(),
                    n: fitted.estimate.n,
                    coefficients,
                    first_stage_r2: fitted.estimate.r2_first_stage.clone(),
                    sargan: fitted.estimate.sargan.map(|s| SarganReport {
                        stat: s.stat,
                        df: s.df,
                        p: s.p,
                        significant: s.p < opts.alpha,
                    }),
                    bma: None,
                }
            }
            EstimatorChoice::TwoSbma => {
                let bma_opts = BmaOptions {
                    subset_cap: opts.subset_cap,
                    sample: opts.subset_sample,
                    vcov: opts.vcov,
                };
                let res = fit_equation_2sbma(eq, &complete, &bma_opts)?;
                let coefficients = res
                    .coef_names
                    .iter()
                    .zip(res.theta_bma.iter().zip(res.se_bma.iter()))
                    .map(|(name, (est, se))| CoefficientReport {
                        name: name.clone(),
                        estimate: *est,
                        se: *se,
                    })
                    .collect();
                // probability-weighted first-stage fit over subsets
                let r2_weighted: f64 = res.subset_fits.iter().map(|f| f.pi * f.r2).sum();
                EquationReport {
                    outcome: eq.outcome.clone(),
                    regressors: eq.regressors.clone(),
                    miivs: eq.miivs.clone(),
                    n: res.n,
                    coefficients,
                    first_stage_r2: vec![r2_weighted],
                    sargan: None,
                    bma: Some(BmaReport {
                        bma_sargan_p: res.bma_sargan_p,
                        significant: res.bma_sargan_p < opts.alpha,
                        n_subsets: res.n_subsets,
                        is_sargan_p: res.is_sargan_p,
                        inclusion: res.inclusion,
                        weak_instruments: res.weak_instruments,
                        ranked_suspects: res.ranked_suspects,
                        suspect_ties: res.suspect_ties,
                        dropped_subsets: res.dropped_subsets,
                        subset_fits: opts.audit_subsets.then_some(res.subset_fits),
                    }),
                }
            }
        };
        reports.push(report);
    }

    Ok(FitReport {
        provenance: Provenance {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            model_path: model_path.to_string(),
            model_sha256: sha256_hex(model_text.as_bytes()),
            data_path: data_path.to_string(),
            data_sha256: sha256_hex(data_bytes),
            estimator: opts.estimator.label().to_string(),
            alpha: opts.alpha,
            vcov: opts.vcov,
            subset_cap: opts.subset_cap,
            subset_sample: opts.subset_sample,
            miiv_draws: opts.miiv.draws,
            miiv_tolerance: opts.miiv.tolerance,
            miiv_seed: opts.miiv.seed,
            n_rows: complete.n_rows(),
            n_rows_dropped: dropped,
        },
        equations: reports,
    })
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

/// Render the report as fixed-width text, 3 decimals everywhere.
pub fn render_text(report: &FitReport) -> String {
    let mut out = String::new();
    let p = &report.provenance;
    let _ = writeln!(out, "MIIV fit | estimator {}, n = {} ({} dropped)", p.estimator, p.n_rows, p.n_rows_dropped);
    let _ = writeln!(out, "model {} [{}]", p.model_path, &p.model_sha256[..12]);
    let _ = writeln!(out, "data  {} [{}]", p.data_path, &p.data_sha256[..12]);
    for eq in &report.equations {
        let _ = writeln!(out);
        let _ = writeln!(out, "Equation {} ~ {}   MIIVs: {{{}}}", eq.outcome, eq.regressors.join(" + "), eq.miivs.join(", "));
        let _ = writeln!(out, "  {:<14} {:>10} {:>10}", "coefficient", "estimate", "SE");
        for c in &eq.coefficients {
            let _ = writeln!(out, "  {:<14} {:>10} {:>10}", c.name, fmt3(c.estimate), fmt3(c.se));
        }
        if let Some(s) = &eq.sargan {
            let _ = writeln!(
                out,
                "  Sargan: stat {} (df {}), p {}{}",
                fmt3(s.stat),
                s.df,
                fmt3(s.p),
                if s.significant { "  *" } else { "" }
            );
        }
        if let Some(b) = &eq.bma {
            let _ = writeln!(
                out,
                "  BMA Sargan p {}{}   ({} subsets)",
                fmt3(b.bma_sargan_p),
                if b.significant { "  *" } else { "" },
                b.n_subsets
            );
            let _ = writeln!(out, "  {:<10} {:>10} {:>10}", "instrument", "IS-p", "inclusion");
            for q in b.is_sargan_p.keys() {
                let _ = writeln!(
                    out,
                    "  {:<10} {:>10} {:>10}{}",
                    q,
                    fmt3(b.is_sargan_p[q]),
                    fmt3(b.inclusion[q]),
                    if b.weak_instruments.contains(q) { "  (weak)" } else { "" }
                );
            }
            if let Some(first) = b.ranked_suspects.first() {
                let _ = writeln!(
                    out,
                    "  prime suspect: {first}{}",
                    if b.suspect_ties { " (tied)" } else { "" }
                );
            }
        }
    }
    out
}

/// One transformed equation explained: regression, disturbance composition,
/// instrument set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquationExplain {
    pub outcome: String,
    pub regressors: Vec<String>,
    pub disturbance: String,
    pub miivs: Vec<String>,
    pub overidentification: i64,
    pub just_identified: bool,
}

/// Transform a model and report every equation's MIIV set.
pub fn explain_miivs(model_text: &str, miiv: &MiivConfig) -> Result<Vec<EquationExplain>> {
    let ir = parse_model(model_text)?;
    let equations = equations_with_miivs(&ir, miiv)?;
    Ok(equations
        .iter()
        .map(|eq| EquationExplain {
            outcome: eq.outcome.clone(),
            regressors: eq.regressors.clone(),
            disturbance: eq.disturbance_display(&ir),
            miivs: eq.miivs.clone(),
            overidentification: eq.overidentification(),
            just_identified: eq.overidentification() == 0,
        })
        .collect())
}

/// Text rendering of [`explain_miivs`].
pub fn render_explain(explains: &[EquationExplain]) -> String {
    let mut out = String::new();
    for e in explains {
        let _ = writeln!(out, "{} = b0 + {}", e.outcome, e.regressors.join(" + "));
        let _ = writeln!(out, "  u = {}", e.disturbance);
        let _ = writeln!(
            out,
            "  MIIVs: {{{}}}  (overidentification df {}{})",
            e.miivs.join(", "),
            e.overidentification,
            if e.just_identified { "; just identified, Sargan unavailable" } else { "" }
        );
    }
    out
}
