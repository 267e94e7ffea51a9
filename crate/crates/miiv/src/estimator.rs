//! Equation-level OLS and 2SLS with the classical Sargan test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::equations::EstimationEquation;
use crate::error::{Error, Result};
use crate::linalg::{least_squares, with_intercept};
use crate::special::chi_square_upper_tail;

/// Degrees-of-freedom convention for the residual variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VcovDenominator {
    /// n - r - 1 (regressors plus intercept).
    #[default]
    #[serde(rename = "n-k")]
    NMinusK,
    /// Plain n, for cross-checks against software using the uncorrected form.
    #[serde(rename = "n")]
    N,
}

impl VcovDenominator {
    fn value(self, n: usize, r: usize) -> f64 {
        match self {
            VcovDenominator::NMinusK => (n - r - 1) as f64,
            VcovDenominator::N => n as f64,
        }
    }
}

/// Sargan overidentification test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sargan {
    pub stat: f64,
    pub df: usize,
    pub p: f64,
}

/// One estimated equation.
#[derive(Debug, Clone)]
pub struct EquationEstimate {
    /// Intercept first, then one coefficient per regressor.
    pub theta: DVector<f64>,
    pub se: DVector<f64>,
    /// Residuals computed against the *original* regressors.
    pub residuals: DVector<f64>,
    /// First-stage R² per regressor (1.0 when self-instrumenting).
    pub r2_first_stage: Vec<f64>,
    /// Present when the equation is overidentified.
    pub sargan: Option<Sargan>,
    pub n: usize,
}

/// Ordinary least squares on a design that already carries its intercept.
///
/// Returns `(coefficients, residuals, r_squared)` with R² about the mean.
pub fn ols(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let fit = least_squares(x, y, "OLS")?;
    Ok((fit.coefficients, fit.residuals, fit.r_squared))
}

/// Two-stage least squares of `y` on regressors `z` using instruments `v`.
///
/// Intercept columns are added to both stages internally; `z` and `v` carry
/// data columns only. Standard errors come from `sigma2 * (Zhat' Zhat)^{-1}`
/// with the requested denominator; the Sargan test is attached whenever the
/// equation is overidentified.
pub fn two_sls(
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    v: &DMatrix<f64>,
    vcov: VcovDenominator,
) -> Result<EquationEstimate> {
    let n = y.len();
    let r = z.ncols();
    let nv = v.ncols();
    if nv < r {
        return Err(Error::Underidentified {
            equation: "(design)".to_string(),
            miivs: nv,
            regressors: r,
        });
    }
    if n <= nv + 1 {
        return Err(Error::NotEnoughRows { context: "2SLS".to_string(), rows: n, needed: nv + 2 });
    }

    let zd = with_intercept(z);
    let vd = with_intercept(v);

    // First stage. When the instruments are exactly the regressors the
    // projection is the identity and the second stage below *is* OLS on the
    // same decomposition path.
    let (zhat, r2_first_stage) = if z == v {
        (zd.clone(), vec![1.0; r])
    } else {
        let mut zhat = zd.clone();
        let mut r2s = Vec::with_capacity(r);
        for j in 1..zd.ncols() {
            let col = DVector::from_column_slice(zd.column(j).as_slice());
            let fit = least_squares(&vd, &col, "2SLS first stage")?;
            zhat.set_column(j, &fit.fitted);
            r2s.push(fit.r_squared);
        }
        (zhat, r2s)
    };

    let second = least_squares(&zhat, y, "2SLS second stage")?;
    let theta = second.coefficients;
    let residuals = y - &zd * &theta;
    let rss: f64 = residuals.dot(&residuals);
    let sigma2 = rss / vcov.value(n, r);
    let se = DVector::from_iterator(
        theta.len(),
        (0..theta.len()).map(|i| (sigma2 * second.xtx_inv[(i, i)]).sqrt()),
    );

    let sargan = if nv > r { Some(sargan_test(&residuals, v, r)?) } else { None };

    Ok(EquationEstimate { theta, se, residuals, r2_first_stage, sargan, n })
}

/// Sargan's nR² overidentification test.
///
/// Regresses the 2SLS residuals on the instruments (intercept included);
/// `stat = n R²` is chi-square with `v - r` degrees of freedom under the
/// null that all instruments are uncorrelated with the equation error.
pub fn sargan_test(residuals: &DVector<f64>, v: &DMatrix<f64>, r: usize) -> Result<Sargan> {
    let nv = v.ncols();
    if nv <= r {
        return Err(Error::JustIdentified { instruments: nv, regressors: r });
    }
    let vd = with_intercept(v);
    let fit = least_squares(&vd, residuals, "Sargan auxiliary regression")?;
    let n = residuals.len();
    let stat = n as f64 * fit.r_squared;
    let df = nv - r;
    let p = chi_square_upper_tail(stat, df);
    Ok(Sargan { stat, df, p })
}

/// An equation estimated against a dataset, with names attached.
#[derive(Debug, Clone)]
pub struct FittedEquation {
    pub outcome: String,
    /// `(Intercept)` first, then the regressor names.
    pub coef_names: Vec<String>,
    pub miivs: Vec<String>,
    pub estimate: EquationEstimate,
}

/// Estimate one transformed equation by MIIV-2SLS.
pub fn fit_equation_2sls(
    eq: &EstimationEquation,
    data: &Dataset,
    vcov: VcovDenominator,
) -> Result<FittedEquation> {
    if eq.miivs.len() < eq.regressors.len() {
        return Err(Error::Underidentified {
            equation: eq.outcome.clone(),
            miivs: eq.miivs.len(),
            regressors: eq.regressors.len(),
        });
    }
    let y = data.column(&eq.outcome)?;
    let z = data.columns(&eq.regressors)?;
    let v = data.columns(&eq.miivs)?;
    let estimate = two_sls(&y, &z, &v, vcov).map_err(|e| match e {
        Error::Underidentified { miivs, regressors, .. } => Error::Underidentified {
            equation: eq.outcome.clone(),
            miivs,
            regressors,
        },
        other => other,
    })?;
    let mut coef_names = vec!["(Intercept)".to_string()];
    coef_names.extend(eq.regressors.iter().cloned());
    Ok(FittedEquation { outcome: eq.outcome.clone(), coef_names, miivs: eq.miivs.clone(), estimate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, seed: u64) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        // deterministic pseudo-data: y depends on z, z correlates with v
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut z = DMatrix::zeros(n, 1);
        let mut v = DMatrix::zeros(n, 3);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let f: f64 = rng.gen_range(-1.0..1.0);
            for j in 0..3 {
                v[(i, j)] = f + rng.gen_range(-0.5..0.5);
            }
            z[(i, 0)] = f + rng.gen_range(-0.3..0.3);
            y[i] = 0.5 + 2.0 * z[(i, 0)] + rng.gen_range(-0.2..0.2);
        }
        (y, z, v)
    }

    #[test]
    fn noiseless_ols_recovers_exactly() {
        let x = DMatrix::from_fn(12, 2, |i, j| if j == 0 { 1.0 } else { (i as f64) - 3.0 });
        let y = DVector::from_fn(12, |i, _| 1.0 + 2.0 * ((i as f64) - 3.0));
        let (beta, resid, r2) = ols(&y, &x).unwrap();
        assert!((beta[0] - 1.0).abs() < 1e-12 && (beta[1] - 2.0).abs() < 1e-12);
        assert!(resid.norm() < 1e-10);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_instrumenting_reproduces_ols_bitwise() {
        let (y, z, _) = toy(40, 7);
        let est = two_sls(&y, &z, &z, VcovDenominator::default()).unwrap();
        let zd = with_intercept(&z);
        let (beta, resid, _) = ols(&y, &zd).unwrap();
        assert_eq!(est.theta, beta);
        assert_eq!(est.residuals, resid);
        assert_eq!(est.r2_first_stage, vec![1.0]);
    }

    #[test]
    fn matches_dense_normal_equations_oracle() {
        // theta = (Zhat'Zhat)^{-1} Zhat'y with Zhat = Vd(Vd'Vd)^{-1}Vd'Zd,
        // assembled here with explicit inverses as an independent route.
        let (y, z, v) = toy(30, 21);
        let est = two_sls(&y, &z, &v, VcovDenominator::default()).unwrap();

        let zd = with_intercept(&z);
        let vd = with_intercept(&v);
        let vtv_inv = (vd.transpose() * &vd).try_inverse().unwrap();
        let zhat = &vd * &vtv_inv * vd.transpose() * &zd;
        let theta = (zhat.transpose() * &zhat).try_inverse().unwrap() * zhat.transpose() * &y;
        for i in 0..theta.len() {
            assert!((est.theta[i] - theta[i]).abs() < 1e-10, "coef {i}");
        }
    }

    #[test]
    fn instrument_column_order_and_rotation_invariance() {
        let (y, z, v) = toy(50, 3);
        let est = two_sls(&y, &z, &v, VcovDenominator::default()).unwrap();

        // permute instrument columns
        let mut perm = v.clone();
        perm.swap_columns(0, 2);
        let est_p = two_sls(&y, &z, &perm, VcovDenominator::default()).unwrap();
        assert!((est.theta.clone() - est_p.theta).norm() < 1e-10);

        // nonsingular linear recombination of instruments
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.0, 0.0, 1.0, -0.3, 0.2, 0.0, 1.0]);
        let mixed = &v * a;
        let est_m = two_sls(&y, &z, &mixed, VcovDenominator::default()).unwrap();
        assert!((est.theta.clone() - est_m.theta).norm() < 1e-10);
        let sp = est.sargan.unwrap();
        let sm = est_m.sargan.unwrap();
        assert!((sp.stat - sm.stat).abs() < 1e-8);
    }

    #[test]
    fn sargan_is_one_when_residuals_are_orthogonal() {
        // Residuals built orthogonal to both instruments and to the
        // intercept: auxiliary R² is zero, stat 0, p 1.
        let residuals = DVector::from_column_slice(&[1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let mut v = DMatrix::zeros(8, 2);
        let v1 = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0];
        let v2 = [5.0, 5.0, 1.0, 1.0, 7.0, 7.0, 2.0, 2.0];
        for i in 0..8 {
            v[(i, 0)] = v1[i];
            v[(i, 1)] = v2[i];
        }
        let s = sargan_test(&residuals, &v, 1).unwrap();
        assert!(s.stat.abs() < 1e-12);
        assert!(s.p > 1.0 - 1e-12);
        assert_eq!(s.df, 1);
    }

    #[test]
    fn sargan_closed_form_df2() {
        // stat = n * R2 = 5 with df 2 has tail probability e^{-2.5}.
        let p = chi_square_upper_tail(5.0, 2);
        assert!((p - (-2.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn just_identified_equation_has_no_test() {
        let (y, z, v) = toy(25, 5);
        let v1 = v.columns(0, 1).clone_owned();
        let est = two_sls(&y, &z, &v1, VcovDenominator::default()).unwrap();
        assert!(est.sargan.is_none());
        let err = sargan_test(&est.residuals, &v1, 1).unwrap_err();
        assert!(matches!(err, Error::JustIdentified { instruments: 1, regressors: 1 }));
    }

    #[test]
    fn underidentified_design_is_rejected() {
        let (y, z, _) = toy(25, 9);
        let empty = DMatrix::zeros(25, 0);
        let err = two_sls(&y, &z, &empty, VcovDenominator::default()).unwrap_err();
        assert!(matches!(err, Error::Underidentified { .. }));
    }

    #[test]
    fn vcov_denominator_switch() {
        let (y, z, v) = toy(30, 13);
        let a = two_sls(&y, &z, &v, VcovDenominator::NMinusK).unwrap();
        let b = two_sls(&y, &z, &v, VcovDenominator::N).unwrap();
        let ratio = ((30.0 - 2.0) / 30.0f64).sqrt();
        for i in 0..a.se.len() {
            assert!((b.se[i] / a.se[i] - ratio).abs() < 1e-12);
        }
    }
}
