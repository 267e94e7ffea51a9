//! Latent-to-observed transformation and model-implied instrument search.
//!
//! Each latent variable is replaced by its scaling indicator minus that
//! indicator's error. The result is one estimable regression per non-scaling
//! indicator and per structural equation, each with a composite disturbance
//! mixing measurement errors and structural disturbances. An observed
//! variable qualifies as a model-implied instrument for an equation when the
//! model itself forces its covariance with that composite disturbance to
//! zero; the check runs numerically at generic parameter draws.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelIR, ParamAssignment, ParamKind, ParamValue, ReducedForm};

/// Sign/weight of one error term inside a composite disturbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TermWeight {
    /// Enters with weight +1 (own error, structural disturbance).
    One,
    /// Enters with the negated value of a coefficient (substituted scaling
    /// indicator errors).
    NegCoef(ParamValue),
}

/// One error-term contribution `weight * e(variable)` to a composite
/// disturbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceTerm {
    /// Variable whose error term (for latents: structural disturbance) enters.
    pub error_of: String,
    pub weight: TermWeight,
}

impl DisturbanceTerm {
    fn value(&self, params: &ParamAssignment) -> Result<f64> {
        match &self.weight {
            TermWeight::One => Ok(1.0),
            TermWeight::NegCoef(p) => Ok(-params.value_of(p)?),
        }
    }
}

/// One transformed estimation equation `outcome = Z theta + u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationEquation {
    pub id: usize,
    pub outcome: String,
    /// Regressor columns, scaling indicators substituted for latents.
    pub regressors: Vec<String>,
    /// Model parameters carried by each regressor column.
    pub coefficient_params: Vec<ParamValue>,
    /// Composition of the disturbance `u`.
    pub disturbance: Vec<DisturbanceTerm>,
    /// Model-implied instruments, sorted; empty until [`derive_miivs`] runs.
    pub miivs: Vec<String>,
}

impl EstimationEquation {
    /// Human-readable rendering of `u`, e.g. `e(y2) - (eta1=~y2)*e(y1)`.
    pub fn disturbance_display(&self, ir: &ModelIR) -> String {
        let mut out = String::new();
        for (i, term) in self.disturbance.iter().enumerate() {
            let err = if ir.is_latent(&term.error_of) {
                format!("zeta({})", term.error_of)
            } else {
                format!("e({})", term.error_of)
            };
            match &term.weight {
                TermWeight::One => {
                    if i == 0 {
                        out.push_str(&err);
                    } else {
                        out.push_str(&format!(" + {err}"));
                    }
                }
                TermWeight::NegCoef(p) => {
                    let coef = match p {
                        ParamValue::Fixed(v) => format!("{v}"),
                        ParamValue::Free(name) => format!("({name})"),
                    };
                    out.push_str(&format!(" - {coef}*{err}"));
                }
            }
        }
        out
    }

    /// Degrees of overidentification once MIIVs are derived.
    pub fn overidentification(&self) -> i64 {
        self.miivs.len() as i64 - self.regressors.len() as i64
    }
}

/// Rewrite the model as observed-variable regressions.
///
/// Produces one equation per non-scaling indicator and one per structural
/// equation (expressed through scaling indicators). MIIV sets are left empty.
pub fn transform_to_observed(ir: &ModelIR) -> Result<Vec<EstimationEquation>> {
    let mut equations = Vec::new();

    // Measurement equations: v = sum_L lambda_vL * s(L) + [e_v - sum lambda_vL e_s(L)]
    for obs in &ir.observed {
        let loadings = ir.loadings_of_indicator(obs);
        if loadings.is_empty() || ir.scaling.values().any(|s| s == obs) {
            continue;
        }
        let mut regressors = Vec::new();
        let mut coefficient_params = Vec::new();
        let mut disturbance = vec![DisturbanceTerm {
            error_of: obs.clone(),
            weight: TermWeight::One,
        }];
        for l in &loadings {
            let scaling = ir
                .scaling_indicator(&l.latent)
                .ok_or_else(|| Error::NoScalingIndicator { latent: l.latent.clone() })?;
            regressors.push(scaling.to_string());
            coefficient_params.push(l.param.clone());
            disturbance.push(DisturbanceTerm {
                error_of: scaling.to_string(),
                weight: TermWeight::NegCoef(l.param.clone()),
            });
        }
        equations.push(EstimationEquation {
            id: equations.len(),
            outcome: obs.clone(),
            regressors,
            coefficient_params,
            disturbance,
            miivs: Vec::new(),
        });
    }

    // Structural equations: s(L) = sum_P coef * s(P) + [e_s(L) + zeta_L - sum coef e_s(P)]
    for latent in &ir.latents {
        let regs = ir.regressions_of(latent);
        if regs.is_empty() {
            continue;
        }
        let scaling = ir
            .scaling_indicator(latent)
            .ok_or_else(|| Error::NoScalingIndicator { latent: latent.clone() })?;
        let mut regressors = Vec::new();
        let mut coefficient_params = Vec::new();
        let mut disturbance = vec![
            DisturbanceTerm { error_of: scaling.to_string(), weight: TermWeight::One },
            DisturbanceTerm { error_of: latent.clone(), weight: TermWeight::One },
        ];
        for r in &regs {
            if ir.is_latent(&r.predictor) {
                let pred_scaling = ir
                    .scaling_indicator(&r.predictor)
                    .ok_or_else(|| Error::NoScalingIndicator { latent: r.predictor.clone() })?;
                regressors.push(pred_scaling.to_string());
                disturbance.push(DisturbanceTerm {
                    error_of: pred_scaling.to_string(),
                    weight: TermWeight::NegCoef(r.param.clone()),
                });
            } else {
                regressors.push(r.predictor.clone());
            }
            coefficient_params.push(r.param.clone());
        }
        equations.push(EstimationEquation {
            id: equations.len(),
            outcome: scaling.to_string(),
            regressors,
            coefficient_params,
            disturbance,
            miivs: Vec::new(),
        });
    }

    Ok(equations)
}

/// Settings for the generic-value instrument checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiivConfig {
    /// Number of generic parameter draws.
    pub draws: usize,
    /// Absolute tolerance below which an implied covariance counts as zero.
    pub tolerance: f64,
    /// Seed of the generic draws (fixed so derivation is deterministic).
    pub seed: u64,
}

impl Default for MiivConfig {
    fn default() -> Self {
        Self { draws: 20, tolerance: 1e-10, seed: 0x4d49_4956 }
    }
}

/// Draw one generic parameter assignment: coefficients and covariances in
/// [0.2, 0.9], variances in [0.5, 1.5]. Parameters are visited in sorted
/// label order, so declaration order cannot change the draws.
fn generic_assignment(ir: &ModelIR, rng: &mut ChaCha8Rng) -> ParamAssignment {
    let mut params = ParamAssignment::new();
    for (name, kind) in ir.free_parameters() {
        let value = match kind {
            ParamKind::Variance => rng.gen_range(0.5..1.5),
            ParamKind::Coefficient | ParamKind::Covariance => rng.gen_range(0.2..0.9),
        };
        params.set(name, value);
    }
    params
}

/// Implied covariance between every candidate variable and the equation
/// disturbance at one assignment.
fn covariances_with_disturbance(
    rf: &ReducedForm,
    eq: &EstimationEquation,
    params: &ParamAssignment,
    candidates: &[String],
) -> Result<BTreeMap<String, f64>> {
    let cov_ve = rf.covariance_variable_error();
    let mut out = BTreeMap::new();
    for cand in candidates {
        let row = rf
            .variable_index(cand)
            .ok_or_else(|| Error::UnknownVariable { name: cand.clone(), line: 0 })?;
        let mut acc = 0.0;
        for term in &eq.disturbance {
            let col = rf
                .variable_index(&term.error_of)
                .ok_or_else(|| Error::UnknownVariable { name: term.error_of.clone(), line: 0 })?;
            acc += term.value(params)? * cov_ve[(row, col)];
        }
        out.insert(cand.clone(), acc);
    }
    Ok(out)
}

/// Derive the model-implied instrument set of one equation.
///
/// A candidate observed variable (excluding the outcome and the regressors)
/// is admitted when its implied covariance with the composite disturbance
/// vanishes at every generic draw and it is generically relevant (nonzero
/// implied covariance with at least one regressor). The order condition and
/// the generic rank/nonsingularity conditions are verified before returning.
pub fn derive_miivs(
    ir: &ModelIR,
    eq: &EstimationEquation,
    config: &MiivConfig,
) -> Result<Vec<String>> {
    let candidates: Vec<String> = ir
        .observed
        .iter()
        .filter(|v| **v != eq.outcome && !eq.regressors.contains(v))
        .cloned()
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut max_cov_u: BTreeMap<String, f64> = BTreeMap::new();
    let mut max_cov_z: BTreeMap<String, f64> = BTreeMap::new();
    let mut first_rf: Option<ReducedForm> = None;

    for draw in 0..config.draws.max(1) {
        let params = generic_assignment(ir, &mut rng);
        let rf = ReducedForm::build(ir, &params)?;
        let cov_u = covariances_with_disturbance(&rf, eq, &params, &candidates)?;
        let cov_vars = rf.covariance_of_variables();
        for cand in &candidates {
            let slot = max_cov_u.entry(cand.clone()).or_insert(0.0);
            *slot = slot.max(cov_u[cand].abs());
            let row = rf.variable_index(cand).expect("candidate indexed");
            let rel = eq
                .regressors
                .iter()
                .map(|z| {
                    let col = rf.variable_index(z).expect("regressor indexed");
                    cov_vars[(row, col)].abs()
                })
                .fold(0.0f64, f64::max);
            let slot = max_cov_z.entry(cand.clone()).or_insert(0.0);
            *slot = slot.max(rel);
        }
        if draw == 0 {
            first_rf = Some(rf);
        }
    }

    let mut miivs: Vec<String> = candidates
        .iter()
        .filter(|c| max_cov_u[*c] < config.tolerance && max_cov_z[*c] > config.tolerance)
        .cloned()
        .collect();
    miivs.sort();

    if miivs.len() < eq.regressors.len() {
        return Err(Error::Underidentified {
            equation: eq.outcome.clone(),
            miivs: miivs.len(),
            regressors: eq.regressors.len(),
        });
    }

    // Rank condition on Cov(V, Z) and nonsingularity of Cov(V) at a generic
    // point; failures here mean the instruments cannot identify theta no
    // matter the sample.
    let rf = first_rf.expect("at least one draw");
    let cov_vars = rf.covariance_of_variables();
    let v_idx: Vec<usize> = miivs.iter().map(|v| rf.variable_index(v).unwrap()).collect();
    let z_idx: Vec<usize> =
        eq.regressors.iter().map(|z| rf.variable_index(z).unwrap()).collect();
    let cov_vz = nalgebra::DMatrix::from_fn(v_idx.len(), z_idx.len(), |i, j| {
        cov_vars[(v_idx[i], z_idx[j])]
    });
    let cov_vv = nalgebra::DMatrix::from_fn(v_idx.len(), v_idx.len(), |i, j| {
        cov_vars[(v_idx[i], v_idx[j])]
    });
    if matrix_rank(&cov_vz) < eq.regressors.len() {
        return Err(Error::SingularSystem {
            context: format!(
                "equation `{}`: implied Cov(V, Z) has rank below the regressor count at generic parameter values",
                eq.outcome
            ),
        });
    }
    if matrix_rank(&cov_vv) < miivs.len() {
        return Err(Error::SingularSystem {
            context: format!(
                "equation `{}`: implied Cov(V) is singular at generic parameter values",
                eq.outcome
            ),
        });
    }

    Ok(miivs)
}

/// Transform the model and derive instruments for every equation.
pub fn equations_with_miivs(ir: &ModelIR, config: &MiivConfig) -> Result<Vec<EstimationEquation>> {
    let mut equations = transform_to_observed(ir)?;
    for eq in &mut equations {
        eq.miivs = derive_miivs(ir, eq, config)?;
    }
    Ok(equations)
}

fn matrix_rank(m: &nalgebra::DMatrix<f64>) -> usize {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.max();
    if max <= 0.0 {
        return 0;
    }
    svd.singular_values.iter().filter(|&&s| s > 1e-10 * max).count()
}
