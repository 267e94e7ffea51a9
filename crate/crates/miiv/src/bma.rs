//! Two-stage Bayesian model averaging over instrument subsets.
//!
//! Every subset of an equation's MIIV set (sizes z+1 through v, so each
//! subset keeps at least one degree of overidentification) gets a first-stage
//! fit scored by an empirical-Bayes g-prior Bayes factor against the null
//! model. Posterior model probabilities then weight the per-subset 2SLS
//! estimates, variances and Sargan p-values into the averaged estimate, the
//! BMA Sargan test, instrument-specific Sargan tests and inclusion
//! probabilities.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::equations::EstimationEquation;
use crate::error::{Error, Result};
use crate::estimator::{two_sls, VcovDenominator};
use crate::linalg::{least_squares, with_intercept};

/// Log Bayes factor assigned to a perfect first stage (R² = 1). Finite so a
/// single degenerate subset takes probability one without poisoning the
/// softmax.
pub const LOG_BF_CAP: f64 = 700.0;

/// Seeded uniform sampling of instrument subsets, for MIIV sets too large to
/// enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetSample {
    pub count: usize,
    pub seed: u64,
}

/// Options for [`fit_equation_2sbma`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BmaOptions {
    /// Hard cap on the number of enumerated subsets.
    pub subset_cap: usize,
    /// Opt-in sampling instead of full enumeration.
    pub sample: Option<SubsetSample>,
    pub vcov: VcovDenominator,
}

impl Default for BmaOptions {
    fn default() -> Self {
        Self { subset_cap: 100_000, sample: None, vcov: VcovDenominator::default() }
    }
}

/// One scored instrument subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetFit {
    pub subset: Vec<String>,
    /// First-stage R² (mean across regressors when there are several).
    pub r2: f64,
    /// Empirical-Bayes g = max(F - 1, 0).
    pub g: f64,
    pub log_bf: f64,
    /// Posterior model probability.
    pub pi: f64,
    /// Second-stage coefficients, intercept first.
    pub theta: Vec<f64>,
    /// Squared standard errors of `theta`.
    pub var_theta: Vec<f64>,
    pub sargan_stat: f64,
    pub sargan_df: usize,
    pub sargan_p: f64,
}

/// Model-averaged result for one equation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BmaEquationResult {
    pub outcome: String,
    /// `(Intercept)` first, then regressor names.
    pub coef_names: Vec<String>,
    pub theta_bma: Vec<f64>,
    /// Averaged variances including the between-model spread term.
    pub var_bma: Vec<f64>,
    pub se_bma: Vec<f64>,
    pub bma_sargan_p: f64,
    /// Instrument-specific Sargan p-values.
    pub is_sargan_p: BTreeMap<String, f64>,
    /// Inclusion probabilities.
    pub inclusion: BTreeMap<String, f64>,
    /// Instruments flagged weak (inclusion probability below 0.5). Flag only;
    /// nothing is dropped.
    pub weak_instruments: Vec<String>,
    /// Instruments ordered by ascending instrument-specific Sargan p; the
    /// head is the prime invalidity suspect.
    pub ranked_suspects: Vec<String>,
    /// True when the minimum instrument-specific p is tied exactly.
    pub suspect_ties: bool,
    pub n: usize,
    pub n_subsets: usize,
    /// Subsets dropped for collinearity, excluded from the probability
    /// normalization.
    pub dropped_subsets: Vec<Vec<String>>,
    /// Full audit trail.
    pub subset_fits: Vec<SubsetFit>,
}

/// Number of instrument subsets of sizes z+1..=v, saturating at u128::MAX.
fn subset_count(v: usize, z: usize) -> u128 {
    let mut total: u128 = 0;
    for l in (z + 1)..=v {
        total = total.saturating_add(binomial(v, l));
    }
    total
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(x) => x / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Enumerate all instrument subsets of sizes z+1..=v in lexicographic order
/// of their sorted name sequences.
pub fn enumerate_subsets(miivs: &[String], z: usize, cap: usize) -> Result<Vec<Vec<String>>> {
    let v = miivs.len();
    if v < z + 1 {
        return Err(Error::Underidentified {
            equation: "(subset enumeration)".to_string(),
            miivs: v,
            regressors: z,
        });
    }
    let count = subset_count(v, z);
    if count > cap as u128 {
        return Err(Error::SubsetCapExceeded { count, cap });
    }

    let mut names: Vec<String> = miivs.to_vec();
    names.sort();
    let mut subsets = Vec::with_capacity(count as usize);
    for l in (z + 1)..=v {
        combinations(&names, l, &mut subsets);
    }
    subsets.sort();
    Ok(subsets)
}

fn combinations(names: &[String], l: usize, out: &mut Vec<Vec<String>>) {
    let v = names.len();
    let mut idx: Vec<usize> = (0..l).collect();
    loop {
        out.push(idx.iter().map(|&i| names[i].clone()).collect());
        // advance the combination cursor
        let mut i = l;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + v - l {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in (i + 1)..l {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Draw `count` distinct subsets uniformly at random (sizes weighted by
/// their counts), returned in lexicographic order.
pub fn sample_subsets(
    miivs: &[String],
    z: usize,
    sample: SubsetSample,
) -> Result<Vec<Vec<String>>> {
    let v = miivs.len();
    if v < z + 1 {
        return Err(Error::Underidentified {
            equation: "(subset sampling)".to_string(),
            miivs: v,
            regressors: z,
        });
    }
    let total = subset_count(v, z);
    if (sample.count as u128) >= total {
        // requesting at least the full family: enumerate it
        return enumerate_subsets(miivs, z, usize::MAX);
    }

    let mut names: Vec<String> = miivs.to_vec();
    names.sort();
    let sizes: Vec<usize> = ((z + 1)..=v).collect();
    let weights: Vec<u128> = sizes.iter().map(|&l| binomial(v, l)).collect();
    let weight_sum: u128 = weights.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < sample.count {
        // pick a size with probability proportional to C(v, l)
        let mut ticket = rng.gen_range(0..weight_sum);
        let mut size = sizes[sizes.len() - 1];
        for (l, w) in sizes.iter().zip(&weights) {
            if ticket < *w {
                size = *l;
                break;
            }
            ticket -= w;
        }
        let mut pool: Vec<usize> = (0..v).collect();
        pool.shuffle(&mut rng);
        let mut pick: Vec<usize> = pool.into_iter().take(size).collect();
        pick.sort_unstable();
        seen.insert(pick);
    }
    let mut subsets: Vec<Vec<String>> = seen
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| names[i].clone()).collect())
        .collect();
    subsets.sort();
    Ok(subsets)
}

/// Empirical-Bayes g: `max(F - 1, 0)` with `F = (R²/p) / ((1-R²)/(n-1-p))`.
///
/// Returns `f64::INFINITY` for a perfect first stage (R² = 1); the Bayes
/// factor side caps that case.
pub fn empirical_bayes_g(r2: f64, p: usize, n: usize) -> Result<f64> {
    if n <= p + 1 {
        return Err(Error::NotEnoughRows {
            context: "empirical Bayes g".to_string(),
            rows: n,
            needed: p + 2,
        });
    }
    if !(0.0..=1.0).contains(&r2) {
        return Err(Error::Numerical(format!("first-stage R² = {r2} outside [0, 1]")));
    }
    if r2 >= 1.0 {
        return Ok(f64::INFINITY);
    }
    let f = (r2 / p as f64) / ((1.0 - r2) / (n - 1 - p) as f64);
    Ok((f - 1.0).max(0.0))
}

/// Log Bayes factor of a g-prior model against the intercept-only null:
/// `((n-p-1)/2) ln(1+g) - ((n-1)/2) ln(1+g(1-R²))`.
pub fn log_bayes_factor(g: f64, r2: f64, p: usize, n: usize) -> f64 {
    if !g.is_finite() || r2 >= 1.0 - 1e-12 {
        return LOG_BF_CAP;
    }
    let np = (n - p - 1) as f64;
    let n1 = (n - 1) as f64;
    0.5 * np * g.ln_1p() - 0.5 * n1 * (g * (1.0 - r2)).ln_1p()
}

/// Posterior model probabilities from log Bayes factors under an equal model
/// prior: a max-stabilized softmax.
pub fn model_probabilities(log_bfs: &[f64]) -> Result<Vec<f64>> {
    if log_bfs.is_empty() {
        return Err(Error::Numerical("no first-stage models to weight".to_string()));
    }
    let max = log_bfs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical(
            "no valid first-stage model: all log Bayes factors are -inf".to_string(),
        ));
    }
    let weights: Vec<f64> = log_bfs.iter().map(|&b| (b - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Model-averaged Sargan p-value: the probability-weighted mean of the
/// per-subset p-values.
pub fn bma_sargan(pis: &[f64], sargan_ps: &[f64]) -> f64 {
    debug_assert_eq!(pis.len(), sargan_ps.len());
    pis.iter().zip(sargan_ps).map(|(pi, p)| pi * p).sum()
}

/// Instrument-specific Sargan p-value for `q`: the Sargan p-values of the
/// subsets containing `q`, weighted by probabilities renormalized over those
/// subsets.
pub fn instrument_specific_sargan(fits: &[SubsetFit], q: &str) -> Result<f64> {
    let mut mass = 0.0;
    let mut acc = 0.0;
    for f in fits.iter().filter(|f| f.subset.iter().any(|s| s == q)) {
        mass += f.pi;
        acc += f.pi * f.sargan_p;
    }
    if mass <= 0.0 {
        return Err(Error::UnknownInstrument { name: q.to_string() });
    }
    Ok(acc / mass)
}

/// Inclusion probability of `q`: total probability of the subsets
/// containing it.
pub fn inclusion_probability(fits: &[SubsetFit], q: &str) -> Result<f64> {
    if !fits.iter().any(|f| f.subset.iter().any(|s| s == q)) {
        return Err(Error::UnknownInstrument { name: q.to_string() });
    }
    Ok(fits
        .iter()
        .filter(|f| f.subset.iter().any(|s| s == q))
        .map(|f| f.pi)
        .sum())
}

/// Order instruments by ascending instrument-specific Sargan p, ties broken
/// lexicographically. The second value reports whether the head of the
/// ranking is an exact tie.
pub fn rank_suspects(is_ps: &BTreeMap<String, f64>) -> (Vec<String>, bool) {
    let mut items: Vec<(&String, f64)> = is_ps.iter().map(|(k, v)| (k, *v)).collect();
    items.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(b.0)));
    let tied = items.len() > 1 && items[0].1 == items[1].1;
    (items.into_iter().map(|(k, _)| k.clone()).collect(), tied)
}

/// Estimate one equation by MIIV-2SBMA.
pub fn fit_equation_2sbma(
    eq: &EstimationEquation,
    data: &Dataset,
    opts: &BmaOptions,
) -> Result<BmaEquationResult> {
    let z = eq.regressors.len();
    if eq.miivs.len() < z + 1 {
        return Err(Error::Underidentified {
            equation: eq.outcome.clone(),
            miivs: eq.miivs.len(),
            regressors: z,
        });
    }
    let subsets = match opts.sample {
        Some(sample) => sample_subsets(&eq.miivs, z, sample)?,
        None => enumerate_subsets(&eq.miivs, z, opts.subset_cap)?,
    };

    let y = data.column(&eq.outcome)?;
    let zmat = data.columns(&eq.regressors)?;
    let n = data.n_rows();
    let largest = subsets.iter().map(|s| s.len()).max().unwrap_or(0);
    if n <= largest + z + 1 {
        return Err(Error::NotEnoughRows {
            context: format!("2SBMA for equation `{}`", eq.outcome),
            rows: n,
            needed: largest + z + 2,
        });
    }

    let mut fits: Vec<SubsetFit> = Vec::with_capacity(subsets.len());
    let mut dropped: Vec<Vec<String>> = Vec::new();
    for subset in subsets {
        match fit_subset(&y, &zmat, &subset, data, n, opts.vcov) {
            Ok(fit) => fits.push(fit),
            Err(
                e @ (Error::RankDeficient { .. } | Error::SingularSystem { .. } | Error::Numerical(_)),
            ) => {
                log::warn!(
                    "equation `{}`: dropping instrument subset {:?}: {e}",
                    eq.outcome,
                    subset
                );
                dropped.push(subset);
            }
            Err(other) => return Err(other),
        }
    }
    if fits.is_empty() {
        return Err(Error::NoValidSubset { equation: eq.outcome.clone() });
    }

    let log_bfs: Vec<f64> = fits.iter().map(|f| f.log_bf).collect();
    let pis = model_probabilities(&log_bfs)
        .map_err(|_| Error::NoValidSubset { equation: eq.outcome.clone() })?;
    for (fit, pi) in fits.iter_mut().zip(&pis) {
        fit.pi = *pi;
    }

    let k = z + 1; // coefficients incl. intercept
    let mut theta_bma = vec![0.0; k];
    for f in &fits {
        for (avg, t) in theta_bma.iter_mut().zip(&f.theta) {
            *avg += f.pi * t;
        }
    }
    let mut var_bma = vec![0.0; k];
    for f in &fits {
        for (i, v) in var_bma.iter_mut().enumerate() {
            let dev = f.theta[i] - theta_bma[i];
            *v += f.pi * f.var_theta[i] + f.pi * dev * dev;
        }
    }
    let se_bma: Vec<f64> = var_bma.iter().map(|v| v.sqrt()).collect();

    let sargan_ps: Vec<f64> = fits.iter().map(|f| f.sargan_p).collect();
    let bma_sargan_p = bma_sargan(&pis, &sargan_ps);

    let mut is_sargan_p = BTreeMap::new();
    let mut inclusion = BTreeMap::new();
    for q in &eq.miivs {
        // Instruments whose every subset was dropped vanish from the maps.
        if fits.iter().any(|f| f.subset.iter().any(|s| s == q)) {
            is_sargan_p.insert(q.clone(), instrument_specific_sargan(&fits, q)?);
            inclusion.insert(q.clone(), inclusion_probability(&fits, q)?);
        } else {
            log::warn!("equation `{}`: instrument `{q}` appears in no retained subset", eq.outcome);
        }
    }
    let weak_instruments: Vec<String> = inclusion
        .iter()
        .filter(|(_, p)| **p < 0.5)
        .map(|(q, _)| q.clone())
        .collect();
    let (ranked_suspects, suspect_ties) = rank_suspects(&is_sargan_p);

    let mut coef_names = vec!["(Intercept)".to_string()];
    coef_names.extend(eq.regressors.iter().cloned());

    Ok(BmaEquationResult {
        outcome: eq.outcome.clone(),
        coef_names,
        theta_bma,
        var_bma,
        se_bma,
        bma_sargan_p,
        is_sargan_p,
        inclusion,
        weak_instruments,
        ranked_suspects,
        suspect_ties,
        n,
        n_subsets: fits.len(),
        dropped_subsets: dropped,
        subset_fits: fits,
    })
}

fn fit_subset(
    y: &nalgebra::DVector<f64>,
    zmat: &nalgebra::DMatrix<f64>,
    subset: &[String],
    data: &Dataset,
    n: usize,
    vcov: VcovDenominator,
) -> Result<SubsetFit> {
    let names: Vec<String> = subset.to_vec();
    let vmat = data.columns(&names)?;
    let vd = with_intercept(&vmat);

    // First-stage R², averaged over regressors (single regressor in all the
    // analyses of record).
    let mut r2_sum = 0.0;
    for j in 0..zmat.ncols() {
        let col = nalgebra::DVector::from_column_slice(zmat.column(j).as_slice());
        let first = least_squares(&vd, &col, "2SBMA first stage")?;
        r2_sum += first.r_squared;
    }
    let r2 = r2_sum / zmat.ncols() as f64;

    let p = subset.len();
    let g = empirical_bayes_g(r2, p, n)?;
    let log_bf = log_bayes_factor(g, r2, p, n);

    let est = two_sls(y, zmat, &vmat, vcov)?;
    let sargan = est.sargan.expect("subset keeps one degree of overidentification");

    Ok(SubsetFit {
        subset: names,
        r2,
        g,
        log_bf,
        pi: 0.0,
        theta: est.theta.iter().copied().collect(),
        var_theta: est.se.iter().map(|s| s * s).collect(),
        sargan_stat: sargan.stat,
        sargan_df: sargan.df,
        sargan_p: sargan.p,
    })
}
