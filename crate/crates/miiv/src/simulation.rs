//! Monte Carlo harness for the two simulation designs.
//!
//! Both designs share a two-factor, eight-indicator population with unit
//! loadings; design 1 adds an omitted error covariance between y2 and y3
//! (an invalid instrument on the same factor), design 2 between y2 and y5
//! (a weak invalid instrument on the other factor). Each replication draws
//! multivariate-normal data and estimates the y2 loading three ways: 2SLS on
//! the misspecified MIIV set, 2SLS on the true-model MIIV set, and 2SBMA on
//! the misspecified set.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::bma::{fit_equation_2sbma, BmaOptions};
use crate::dataset::Dataset;
use crate::equations::{derive_miivs, transform_to_observed, EstimationEquation, MiivConfig};
use crate::error::{Error, Result};
use crate::estimator::{two_sls, VcovDenominator};
use crate::model::{implied_covariance, parse_model, ParamAssignment};

/// Rejection level used for every power/specificity outcome.
pub const ALPHA: f64 = 0.05;

/// The two population designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Design {
    #[serde(rename = "sim1")]
    Sim1,
    #[serde(rename = "sim2")]
    Sim2,
}

impl Design {
    pub fn label(self) -> &'static str {
        match self {
            Design::Sim1 => "sim1",
            Design::Sim2 => "sim2",
        }
    }

    /// The indicator whose error covaries with y2's in the population.
    pub fn invalid_instrument(self) -> &'static str {
        match self {
            Design::Sim1 => "y3",
            Design::Sim2 => "y5",
        }
    }
}

/// One simulation condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub design: Design,
    /// Omitted error covariance.
    pub ec: f64,
    /// Inter-factor correlation.
    pub fc: f64,
    /// Sample size per replication.
    pub n: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub seed: u64,
    /// Factor variance psi; indicators have unit loadings, so total indicator
    /// variance is psi + error_variance.
    #[serde(default = "default_factor_variance")]
    pub factor_variance: f64,
    #[serde(default = "default_error_variance")]
    pub error_variance: f64,
}

fn default_reps() -> usize {
    500
}
fn default_factor_variance() -> f64 {
    0.36
}
fn default_error_variance() -> f64 {
    0.64
}

impl SimulationConfig {
    pub fn new(design: Design, ec: f64, fc: f64, n: usize, reps: usize, seed: u64) -> Self {
        Self {
            design,
            ec,
            fc,
            n,
            reps,
            seed,
            factor_variance: default_factor_variance(),
            error_variance: default_error_variance(),
        }
    }

    pub fn condition_id(&self) -> String {
        format!("{}_ec{}_fc{}_n{}", self.design.label(), self.ec, self.fc, self.n)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.factor_variance) || !positive(self.error_variance) {
            return Err(Error::InvalidConfig(
                "factor and error variances must be positive".to_string(),
            ));
        }
        if self.ec.abs() >= self.error_variance {
            return Err(Error::InvalidConfig(format!(
                "|ec| = {} must stay below the error variance {} (error correlation below 1)",
                self.ec, self.error_variance
            )));
        }
        if self.fc.abs() >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "fc = {} is a correlation and must lie in (-1, 1)",
                self.fc
            )));
        }
        if self.n < 20 {
            return Err(Error::InvalidConfig(format!("n = {} is too small", self.n)));
        }
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be positive".to_string()));
        }
        Ok(())
    }

    /// Population model script with every parameter fixed at its numeric
    /// value.
    pub fn population_script(&self) -> String {
        let psi = self.factor_variance;
        let th = self.error_variance;
        let fc_cov = self.fc * psi;
        let ec_pair = match self.design {
            Design::Sim1 => "y2 ~~ {ec}*y3",
            Design::Sim2 => "y2 ~~ {ec}*y5",
        }
        .replace("{ec}", &format!("{}", self.ec));
        let mut lines = vec![
            "eta1 =~ 1*y1 + 1*y2 + 1*y3 + 1*y4".to_string(),
            "eta2 =~ 1*y5 + 1*y6 + 1*y7 + 1*y8".to_string(),
            format!("eta1 ~~ {psi}*eta1"),
            format!("eta2 ~~ {psi}*eta2"),
            format!("eta1 ~~ {fc_cov}*eta2"),
            ec_pair,
        ];
        for k in 1..=8 {
            lines.push(format!("y{k} ~~ {th}*y{k}"));
        }
        lines.join("\n")
    }

    /// Hypothesized (estimation) model: free loadings and factor covariance,
    /// optionally including the error-covariance edge of the true structure.
    pub fn estimation_script(&self, include_error_covariance: bool) -> String {
        let mut lines = vec![
            "eta1 =~ y1 + y2 + y3 + y4".to_string(),
            "eta2 =~ y5 + y6 + y7 + y8".to_string(),
            "eta1 ~~ eta2".to_string(),
        ];
        if include_error_covariance {
            lines.push(match self.design {
                Design::Sim1 => "y2 ~~ y3".to_string(),
                Design::Sim2 => "y2 ~~ y5".to_string(),
            });
        }
        lines.join("\n")
    }
}

/// Population covariance of the eight indicators plus the target loading.
#[derive(Debug, Clone)]
pub struct Population {
    pub names: Vec<String>,
    pub sigma: DMatrix<f64>,
    pub true_lambda2: f64,
}

/// Assemble the population covariance through the model-implied algebra and
/// reject non-positive-definite configurations.
pub fn build_population(config: &SimulationConfig) -> Result<Population> {
    config.validate()?;
    let ir = parse_model(&config.population_script())?;
    let implied = implied_covariance(&ir, &ParamAssignment::new())?;
    if !implied.positive_definite {
        return Err(Error::NotPositiveDefinite {
            context: config.condition_id(),
            min_eigenvalue: implied.min_eigenvalue,
        });
    }
    Ok(Population { names: implied.names, sigma: implied.matrix, true_lambda2: 1.0 })
}

/// Draw `n` i.i.d. rows from N(0, sigma).
pub fn sample_mvn(sigma: &DMatrix<f64>, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(sigma.clone()).ok_or(Error::NotPositiveDefinite {
        context: "multivariate normal sampling".to_string(),
        min_eigenvalue: f64::NAN,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_mvn_rows(&chol, n, &mut rng))
}

fn sample_mvn_rows(chol: &Cholesky<f64, Dyn>, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let p = chol.l_dirty().nrows();
    let l = chol.l();
    let mut out = DMatrix::zeros(n, p);
    let mut z = nalgebra::DVector::zeros(p);
    for i in 0..n {
        for k in 0..p {
            z[k] = rng.sample(StandardNormal);
        }
        let row = &l * &z;
        for k in 0..p {
            out[(i, k)] = row[k];
        }
    }
    out
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Independent substream per (seed, condition, replication); parallel and
/// serial execution draw identical numbers.
pub fn replication_rng(seed: u64, condition_id: &str, rep: usize) -> ChaCha8Rng {
    let mut k = splitmix64(seed ^ fnv1a(condition_id));
    k = splitmix64(k ^ (rep as u64));
    ChaCha8Rng::seed_from_u64(k)
}

/// Per-estimator Monte Carlo outcomes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub median_bias: f64,
    pub mean_abs_bias: f64,
    /// Rejection rate of the (BMA) Sargan test at alpha = .05.
    pub sargan_power: f64,
    pub mean_se: f64,
}

/// Aggregated outcomes of one condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition_id: String,
    pub config: SimulationConfig,
    pub reps_completed: usize,
    pub reps_failed: usize,
    pub invalid_miivs: EstimatorSummary,
    pub correct_miivs: EstimatorSummary,
    pub two_sbma: EstimatorSummary,
    /// Rejection rate of each instrument-specific Sargan test.
    pub is_sargan_power: BTreeMap<String, f64>,
    /// Share of replications where the instrument attains the minimum
    /// instrument-specific p-value.
    pub specificity: BTreeMap<String, f64>,
    pub mean_inclusion: BTreeMap<String, f64>,
}

/// One flat per-replication record for the raw CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepRecord {
    pub design: String,
    pub ec: f64,
    pub fc: f64,
    pub n: usize,
    pub rep: usize,
    pub estimator: String,
    pub estimate: f64,
    pub se: f64,
    pub sargan_p: f64,
    pub min_p_instrument: Option<String>,
    pub is_p_y3: Option<f64>,
    pub is_p_y4: Option<f64>,
    pub is_p_y5: Option<f64>,
    pub is_p_y6: Option<f64>,
    pub is_p_y7: Option<f64>,
    pub is_p_y8: Option<f64>,
    pub incl_y3: Option<f64>,
    pub incl_y4: Option<f64>,
    pub incl_y5: Option<f64>,
    pub incl_y6: Option<f64>,
    pub incl_y7: Option<f64>,
    pub incl_y8: Option<f64>,
}

struct RepOutcome {
    rep: usize,
    invalid: (f64, f64, f64),
    correct: (f64, f64, f64),
    bma: (f64, f64, f64),
    is_p: BTreeMap<String, f64>,
    inclusion: BTreeMap<String, f64>,
    min_p: String,
}

/// Run one condition; returns the summary and the raw per-replication rows.
pub fn run_condition(config: &SimulationConfig) -> Result<(ConditionSummary, Vec<RepRecord>)> {
    let population = build_population(config)?;
    let chol = Cholesky::new(population.sigma.clone()).expect("population checked PD");
    let condition_id = config.condition_id();

    let miiv_cfg = MiivConfig::default();
    let misspec_ir = parse_model(&config.estimation_script(false))?;
    let true_ir = parse_model(&config.estimation_script(true))?;
    let invalid_eq = y2_equation(&misspec_ir, &miiv_cfg)?;
    let correct_eq = y2_equation(&true_ir, &miiv_cfg)?;

    let outcomes: Vec<std::result::Result<RepOutcome, String>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replication_rng(config.seed, &condition_id, rep);
            run_replication(config, &chol, &population.names, &invalid_eq, &correct_eq, rep, &mut rng)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut completed = Vec::new();
    let mut failures = Vec::new();
    for oc in outcomes {
        match oc {
            Ok(o) => completed.push(o),
            Err(msg) => failures.push(msg),
        }
    }
    if !failures.is_empty() {
        log::warn!(
            "condition `{condition_id}`: {} replication(s) failed; first: {}",
            failures.len(),
            failures[0]
        );
    }
    if failures.len() * 100 > config.reps {
        return Err(Error::TooManyFailures {
            condition: condition_id,
            failed: failures.len(),
            total: config.reps,
            first: failures.remove(0),
        });
    }

    let summary = summarize(
        config,
        &condition_id,
        &completed,
        failures.len(),
        &invalid_eq.miivs,
        population.true_lambda2,
    );
    let records = to_records(config, &completed);
    Ok((summary, records))
}

fn y2_equation(ir: &crate::model::ModelIR, cfg: &MiivConfig) -> Result<EstimationEquation> {
    let mut eqs = transform_to_observed(ir)?;
    let mut eq = eqs
        .drain(..)
        .find(|e| e.outcome == "y2")
        .ok_or_else(|| Error::InvalidConfig("simulation model lacks a y2 equation".to_string()))?;
    eq.miivs = derive_miivs(ir, &eq, cfg)?;
    Ok(eq)
}

fn run_replication(
    config: &SimulationConfig,
    chol: &Cholesky<f64, Dyn>,
    names: &[String],
    invalid_eq: &EstimationEquation,
    correct_eq: &EstimationEquation,
    rep: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RepOutcome> {
    let matrix = sample_mvn_rows(chol, config.n, rng);
    let data = Dataset::new(names.to_vec(), matrix)?;

    let y = data.column("y2")?;
    let z = data.columns(&invalid_eq.regressors)?;
    let vcov = VcovDenominator::default();

    let v_invalid = data.columns(&invalid_eq.miivs)?;
    let inv = two_sls(&y, &z, &v_invalid, vcov)?;
    let inv_sargan = inv.sargan.expect("overidentified");

    let v_correct = data.columns(&correct_eq.miivs)?;
    let cor = two_sls(&y, &z, &v_correct, vcov)?;
    let cor_sargan = cor.sargan.expect("overidentified");

    let bma = fit_equation_2sbma(invalid_eq, &data, &BmaOptions::default())?;
    let min_p = bma
        .ranked_suspects
        .first()
        .cloned()
        .ok_or_else(|| Error::NoValidSubset { equation: "y2".to_string() })?;

    Ok(RepOutcome {
        rep,
        invalid: (inv.theta[1], inv.se[1], inv_sargan.p),
        correct: (cor.theta[1], cor.se[1], cor_sargan.p),
        bma: (bma.theta_bma[1], bma.se_bma[1], bma.bma_sargan_p),
        is_p: bma.is_sargan_p,
        inclusion: bma.inclusion,
        min_p,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = values.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

fn summarize_estimator(taken: impl Fn(&RepOutcome) -> (f64, f64, f64), outcomes: &[RepOutcome], truth: f64) -> EstimatorSummary {
    let k = outcomes.len().max(1) as f64;
    let mut biases: Vec<f64> = outcomes.iter().map(|o| taken(o).0 - truth).collect();
    let mean_abs_bias = biases.iter().map(|b| b.abs()).sum::<f64>() / k;
    let mean_se = outcomes.iter().map(|o| taken(o).1).sum::<f64>() / k;
    let sargan_power = outcomes.iter().filter(|o| taken(o).2 < ALPHA).count() as f64 / k;
    EstimatorSummary { median_bias: median(&mut biases), mean_abs_bias, sargan_power, mean_se }
}

fn summarize(
    config: &SimulationConfig,
    condition_id: &str,
    outcomes: &[RepOutcome],
    failed: usize,
    instruments: &[String],
    truth: f64,
) -> ConditionSummary {
    let k = outcomes.len().max(1) as f64;

    let mut is_sargan_power = BTreeMap::new();
    let mut specificity = BTreeMap::new();
    let mut mean_inclusion = BTreeMap::new();
    for q in instruments {
        let rejections = outcomes.iter().filter(|o| o.is_p.get(q).is_some_and(|p| *p < ALPHA)).count();
        is_sargan_power.insert(q.clone(), rejections as f64 / k);
        let minima = outcomes.iter().filter(|o| &o.min_p == q).count();
        specificity.insert(q.clone(), minima as f64 / k);
        let incl = outcomes.iter().filter_map(|o| o.inclusion.get(q)).sum::<f64>() / k;
        mean_inclusion.insert(q.clone(), incl);
    }

    ConditionSummary {
        condition_id: condition_id.to_string(),
        config: config.clone(),
        reps_completed: outcomes.len(),
        reps_failed: failed,
        invalid_miivs: summarize_estimator(|o| o.invalid, outcomes, truth),
        correct_miivs: summarize_estimator(|o| o.correct, outcomes, truth),
        two_sbma: summarize_estimator(|o| o.bma, outcomes, truth),
        is_sargan_power,
        specificity,
        mean_inclusion,
    }
}

fn to_records(config: &SimulationConfig, outcomes: &[RepOutcome]) -> Vec<RepRecord> {
    let mut records = Vec::with_capacity(outcomes.len() * 3);
    let base = |rep: usize| RepRecord {
        design: config.design.label().to_string(),
        ec: config.ec,
        fc: config.fc,
        n: config.n,
        rep,
        estimator: String::new(),
        estimate: f64::NAN,
        se: f64::NAN,
        sargan_p: f64::NAN,
        min_p_instrument: None,
        is_p_y3: None,
        is_p_y4: None,
        is_p_y5: None,
        is_p_y6: None,
        is_p_y7: None,
        is_p_y8: None,
        incl_y3: None,
        incl_y4: None,
        incl_y5: None,
        incl_y6: None,
        incl_y7: None,
        incl_y8: None,
    };
    for o in outcomes {
        for (tag, (est, se, p)) in
            [("invalid_miivs", o.invalid), ("correct_miivs", o.correct), ("miiv_2sbma", o.bma)]
        {
            let mut rec = base(o.rep);
            rec.estimator = tag.to_string();
            rec.estimate = est;
            rec.se = se;
            rec.sargan_p = p;
            if tag == "miiv_2sbma" {
                rec.min_p_instrument = Some(o.min_p.clone());
                rec.is_p_y3 = o.is_p.get("y3").copied();
                rec.is_p_y4 = o.is_p.get("y4").copied();
                rec.is_p_y5 = o.is_p.get("y5").copied();
                rec.is_p_y6 = o.is_p.get("y6").copied();
                rec.is_p_y7 = o.is_p.get("y7").copied();
                rec.is_p_y8 = o.is_p.get("y8").copied();
                rec.incl_y3 = o.inclusion.get("y3").copied();
                rec.incl_y4 = o.inclusion.get("y4").copied();
                rec.incl_y5 = o.inclusion.get("y5").copied();
                rec.incl_y6 = o.inclusion.get("y6").copied();
                rec.incl_y7 = o.inclusion.get("y7").copied();
                rec.incl_y8 = o.inclusion.get("y8").copied();
            }
            records.push(rec);
        }
    }
    records
}

/// Grid specification: the full cross of designs, error covariances,
/// factor correlations and sample sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub designs: Vec<Design>,
    pub ec: Vec<f64>,
    pub fc: Vec<f64>,
    pub n: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub seed: u64,
    #[serde(default = "default_factor_variance")]
    pub factor_variance: f64,
    #[serde(default = "default_error_variance")]
    pub error_variance: f64,
}

impl GridConfig {
    /// Expand to individual conditions in deterministic order.
    pub fn conditions(&self) -> Vec<SimulationConfig> {
        let mut out = Vec::new();
        for &design in &self.designs {
            for &ec in &self.ec {
                for &fc in &self.fc {
                    for &n in &self.n {
                        out.push(SimulationConfig {
                            design,
                            ec,
                            fc,
                            n,
                            reps: self.reps,
                            seed: self.seed,
                            factor_variance: self.factor_variance,
                            error_variance: self.error_variance,
                        });
                    }
                }
            }
        }
        out
    }
}
