//! Statistical oracle tests: Monte Carlo cross-checks of the covariance
//! algebra, the sampler, and the estimators' distributional behavior.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use miiv::bma::{fit_equation_2sbma, BmaOptions};
use miiv::dataset::Dataset;
use miiv::equations::{derive_miivs, transform_to_observed, MiivConfig};
use miiv::estimator::{two_sls, VcovDenominator};
use miiv::model::{implied_covariance, parse_model, ParamAssignment};
use miiv::simulation::{
    build_population, replication_rng, run_condition, sample_mvn, Design, SimulationConfig,
};

/// Monte Carlo standard error of a sample covariance entry under normality.
fn cov_mc_se(sii: f64, sjj: f64, sij: f64, n: f64) -> f64 {
    ((sii * sjj + sij * sij) / n).sqrt()
}

#[test]
fn implied_covariance_matches_structural_simulation() {
    // Simulate the sim-1 population from first principles (factors, errors,
    // unit loadings assembled by hand) and compare the sample covariance to
    // the implied matrix within 3 Monte Carlo SEs.
    let (psi, th, fc, ec): (f64, f64, f64, f64) = (0.36, 0.64, 0.8, 0.6);
    let cfg = SimulationConfig::new(Design::Sim1, ec, fc, 100, 1, 0);
    let pop = build_population(&cfg).unwrap();

    let n = 1_000_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut sums = DMatrix::<f64>::zeros(8, 8);
    let mut means = DVector::<f64>::zeros(8);
    // factor pair: eta2 = rho*eta1 + sqrt(1-rho^2)*e, scaled to variance psi
    let sp = psi.sqrt();
    // error pair (e2, e3): correlation ec/th
    let rho_e: f64 = ec / th;
    let se = th.sqrt();
    for _ in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let eta1 = sp * z1;
        let eta2 = sp * (fc * z1 + (1.0 - fc * fc).sqrt() * z2);
        let mut e = [0.0f64; 8];
        let w1: f64 = rng.sample(StandardNormal);
        let w2: f64 = rng.sample(StandardNormal);
        e[1] = se * w1;
        e[2] = se * (rho_e * w1 + (1.0 - rho_e * rho_e).sqrt() * w2);
        for (k, slot) in e.iter_mut().enumerate() {
            if k != 1 && k != 2 {
                *slot = se * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut y = [0.0f64; 8];
        for k in 0..4 {
            y[k] = eta1 + e[k];
        }
        for k in 4..8 {
            y[k] = eta2 + e[k];
        }
        for i in 0..8 {
            means[i] += y[i];
            for j in 0..8 {
                sums[(i, j)] += y[i] * y[j];
            }
        }
    }
    means /= n as f64;
    let mut max_z: f64 = 0.0;
    for i in 0..8 {
        for j in 0..8 {
            let sample = sums[(i, j)] / n as f64 - means[i] * means[j];
            let se_ij = cov_mc_se(pop.sigma[(i, i)], pop.sigma[(j, j)], pop.sigma[(i, j)], n as f64);
            let z = (sample - pop.sigma[(i, j)]).abs() / se_ij;
            max_z = max_z.max(z);
        }
    }
    assert!(max_z < 3.0, "worst covariance deviation {max_z:.2} MC SEs");
}

#[test]
fn mvn_sampler_matches_target_covariance() {
    // 36 simultaneous 3-SE boxes; the pinned seed keeps the check
    // deterministic.
    let cfg = SimulationConfig::new(Design::Sim2, 0.6, 0.8, 100, 1, 0);
    let pop = build_population(&cfg).unwrap();
    let n = 200_000usize;
    let x = sample_mvn(&pop.sigma, n, 101).unwrap();
    let nf = n as f64;
    let means = x.row_mean();
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for r in 0..n {
                acc += (x[(r, i)] - means[i]) * (x[(r, j)] - means[j]);
            }
            let sample = acc / (nf - 1.0);
            let se_ij = cov_mc_se(pop.sigma[(i, i)], pop.sigma[(j, j)], pop.sigma[(i, j)], nf);
            assert!(
                (sample - pop.sigma[(i, j)]).abs() < 3.0 * se_ij,
                "entry ({i},{j}): {sample} vs {}",
                pop.sigma[(i, j)]
            );
        }
    }
}

#[test]
fn mvn_sampler_identity_covariance_has_tiny_correlations() {
    let sigma = DMatrix::identity(8, 8);
    let n = 200_000usize;
    let x = sample_mvn(&sigma, n, 5).unwrap();
    let means = x.row_mean();
    for i in 0..8 {
        for j in (i + 1)..8 {
            let mut acc = 0.0;
            let mut vi = 0.0;
            let mut vj = 0.0;
            for r in 0..n {
                let a = x[(r, i)] - means[i];
                let b = x[(r, j)] - means[j];
                acc += a * b;
                vi += a * a;
                vj += b * b;
            }
            let corr = acc / (vi.sqrt() * vj.sqrt());
            assert!(corr.abs() < 0.02, "corr({i},{j}) = {corr}");
        }
    }
}

/// Draw data for one replication of a condition and hand back (y2, y1, V).
fn draw_design(
    sigma: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    names: &[String],
    miivs: &[String],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let p = names.len();
    let l = sigma.l();
    let mut data = DMatrix::zeros(n, p);
    let mut z = DVector::zeros(p);
    for i in 0..n {
        for k in 0..p {
            z[k] = rng.sample(StandardNormal);
        }
        let row = &l * &z;
        for k in 0..p {
            data[(i, k)] = row[k];
        }
    }
    let idx = |name: &str| names.iter().position(|v| v == name).unwrap();
    let y = data.column(idx("y2")).clone_owned();
    let zc = DMatrix::from_columns(&[data.column(idx("y1"))]);
    let cols: Vec<_> = miivs.iter().map(|m| data.column(idx(m))).collect();
    let v = DMatrix::from_columns(&cols);
    (y, zc, v)
}

fn correct_miivs(design: Design) -> Vec<String> {
    let script = match design {
        Design::Sim1 => "eta1 =~ y1 + y2 + y3 + y4\neta2 =~ y5 + y6 + y7 + y8\neta1 ~~ eta2\ny2 ~~ y3",
        Design::Sim2 => "eta1 =~ y1 + y2 + y3 + y4\neta2 =~ y5 + y6 + y7 + y8\neta1 ~~ eta2\ny2 ~~ y5",
    };
    let ir = parse_model(script).unwrap();
    let eqs = transform_to_observed(&ir).unwrap();
    let eq = eqs.iter().find(|e| e.outcome == "y2").unwrap();
    derive_miivs(&ir, eq, &MiivConfig::default()).unwrap()
}

#[test]
fn sargan_null_rejection_rate_is_nominal() {
    // Correctly specified model: p-values approximately uniform, rejection
    // rate at alpha=.05 within [.03, .08] over 500 replications.
    let cfg = SimulationConfig::new(Design::Sim1, 0.6, 0.8, 500, 500, 11);
    let pop = build_population(&cfg).unwrap();
    let chol = nalgebra::Cholesky::new(pop.sigma.clone()).unwrap();
    let miivs = correct_miivs(Design::Sim1);
    let mut rejections = 0usize;
    for rep in 0..500 {
        let mut rng = replication_rng(11, "sargan-null", rep);
        let (y, z, v) = draw_design(&chol, &pop.names, &miivs, 500, &mut rng);
        let est = two_sls(&y, &z, &v, VcovDenominator::default()).unwrap();
        if est.sargan.unwrap().p < 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / 500.0;
    assert!((0.03..=0.08).contains(&rate), "null rejection rate {rate}");
}

#[test]
fn two_sls_is_consistent_at_large_n() {
    // |lambda2_hat - 1| < .02 in at least 95% of replications at N = 10,000.
    // Run under a strong-measurement population (psi = .81) where the
    // estimator's sampling SD at this N is well inside the .02 box.
    let mut cfg = SimulationConfig::new(Design::Sim1, 0.15, 0.8, 10_000, 1, 0);
    cfg.factor_variance = 0.81;
    cfg.error_variance = 0.19;
    let pop = build_population(&cfg).unwrap();
    let chol = nalgebra::Cholesky::new(pop.sigma.clone()).unwrap();
    let miivs = correct_miivs(Design::Sim1);
    let reps = 200usize;
    let mut inside = 0usize;
    for rep in 0..reps {
        let mut rng = replication_rng(23, "consistency", rep);
        let (y, z, v) = draw_design(&chol, &pop.names, &miivs, 10_000, &mut rng);
        let est = two_sls(&y, &z, &v, VcovDenominator::default()).unwrap();
        if (est.theta[1] - 1.0).abs() < 0.02 {
            inside += 1;
        }
    }
    let share = inside as f64 / reps as f64;
    assert!(share >= 0.95, "only {share} of replications inside the .02 box");
}

#[test]
fn invalid_sargan_power_is_monotone_in_ec_and_n() {
    // Power of the full-set Sargan test rises with the omitted error
    // covariance and with the sample size.
    let mut power = std::collections::BTreeMap::new();
    for ec in [0.1, 0.6] {
        for n in [100usize, 500] {
            let cfg = SimulationConfig::new(Design::Sim1, ec, 0.8, n, 1, 0);
            let pop = build_population(&cfg).unwrap();
            let chol = nalgebra::Cholesky::new(pop.sigma.clone()).unwrap();
            let invalid: Vec<String> = (3..=8).map(|k| format!("y{k}")).collect();
            let reps = 300usize;
            let mut rejections = 0usize;
            for rep in 0..reps {
                let mut rng = replication_rng(37, &format!("power-{ec}-{n}"), rep);
                let (y, z, v) = draw_design(&chol, &pop.names, &invalid, n, &mut rng);
                let est = two_sls(&y, &z, &v, VcovDenominator::default()).unwrap();
                if est.sargan.unwrap().p < 0.05 {
                    rejections += 1;
                }
            }
            power.insert((format!("{ec}"), n), rejections as f64 / reps as f64);
        }
    }
    assert!(power[&("0.1".to_string(), 500)] >= power[&("0.1".to_string(), 100)]);
    assert!(power[&("0.6".to_string(), 500)] >= power[&("0.6".to_string(), 100)]);
    assert!(power[&("0.6".to_string(), 100)] >= power[&("0.1".to_string(), 100)]);
    assert!(power[&("0.6".to_string(), 500)] >= power[&("0.1".to_string(), 500)]);
}

#[test]
fn cross_factor_inclusion_rises_with_factor_correlation() {
    // Mean inclusion probability of the other factor's indicators is ordered
    // by fc (ordering only; magnitudes are convention-dependent).
    let mut means = Vec::new();
    for fc in [0.1, 0.8] {
        let cfg = SimulationConfig::new(Design::Sim1, 0.1, fc, 100, 150, 7);
        let (summary, _) = run_condition(&cfg).unwrap();
        let cross = ["y5", "y6", "y7", "y8"];
        let mean: f64 =
            cross.iter().map(|q| summary.mean_inclusion[*q]).sum::<f64>() / cross.len() as f64;
        means.push(mean);
    }
    assert!(
        means[1] > means[0],
        "cross-factor inclusion {:.3} at fc=.8 not above {:.3} at fc=.1",
        means[1],
        means[0]
    );
}

#[test]
fn zero_misspecification_bias_vanishes_at_large_n() {
    // With ec = 0 all three estimators are consistent; median bias at
    // n = 2000 stays within .02 over 200 replications.
    let cfg = SimulationConfig::new(Design::Sim1, 0.0, 0.8, 2000, 200, 13);
    let (summary, _) = run_condition(&cfg).unwrap();
    for (tag, s) in [
        ("invalid", &summary.invalid_miivs),
        ("correct", &summary.correct_miivs),
        ("2sbma", &summary.two_sbma),
    ] {
        assert!(s.median_bias.abs() < 0.02, "{tag} median bias {}", s.median_bias);
    }
}

#[test]
fn miiv_exclusion_is_generic_not_accidental() {
    // For variables excluded from the MIIV set by the structure (other than
    // outcome/regressors), the implied covariance with u is nonzero in at
    // least 19 of 20 generic draws.
    let script = "eta1 =~ y1 + y2 + y3 + y4\neta2 =~ y5 + y6 + y7 + y8\neta1 ~~ eta2\ny2 ~~ y3";
    let ir = parse_model(script).unwrap();
    let eqs = transform_to_observed(&ir).unwrap();
    let eq = eqs.iter().find(|e| e.outcome == "y2").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut nonzero = 0usize;
    for _ in 0..20 {
        let mut params = ParamAssignment::new();
        for (name, kind) in ir.free_parameters() {
            let value = match kind {
                miiv::model::ParamKind::Variance => rng.gen_range(0.5..1.5),
                _ => rng.gen_range(0.2..0.9),
            };
            params.set(name, value);
        }
        let implied = implied_covariance(&ir, &params).unwrap();
        let idx = |name: &str| implied.names.iter().position(|v| v == name).unwrap();
        let lambda = params.value_of(&eq.coefficient_params[0]).unwrap();
        let cov = implied.matrix[(idx("y3"), idx("y2"))] - lambda * implied.matrix[(idx("y3"), idx("y1"))];
        if cov.abs() > 1e-10 {
            nonzero += 1;
        }
    }
    assert!(nonzero >= 19, "y3 looked valid in {} of 20 draws", 20 - nonzero);
}

#[test]
fn bma_schedule_invariance_smoke() {
    // The averaged quantities cannot depend on evaluation order: rerunning
    // the same equation reproduces results to the last bit.
    let cfg = SimulationConfig::new(Design::Sim1, 0.6, 0.8, 200, 1, 0);
    let pop = build_population(&cfg).unwrap();
    let x = sample_mvn(&pop.sigma, 200, 3).unwrap();
    let data = Dataset::new(pop.names.clone(), x).unwrap();
    let ir = parse_model(&cfg.estimation_script(false)).unwrap();
    let mut eqs = transform_to_observed(&ir).unwrap();
    let eq = eqs.iter_mut().find(|e| e.outcome == "y2").unwrap();
    eq.miivs = derive_miivs(&ir, eq, &MiivConfig::default()).unwrap();
    let a = fit_equation_2sbma(eq, &data, &BmaOptions::default()).unwrap();
    let b = fit_equation_2sbma(eq, &data, &BmaOptions::default()).unwrap();
    assert_eq!(a.theta_bma, b.theta_bma);
    assert_eq!(a.bma_sargan_p, b.bma_sargan_p);
}
