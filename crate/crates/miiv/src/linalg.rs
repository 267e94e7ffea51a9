//! Dense least-squares kernel shared by every regression in the crate.
//!
//! All fits go through one SVD-based solver so that OLS, both 2SLS stages and
//! the Sargan auxiliary regression agree on rank handling: singular values
//! below `RANK_RTOL * sigma_max` are treated as zero and the fit is rejected
//! as rank deficient. No explicit matrix inverse is formed anywhere;
//! `(X'X)^{-1}` is assembled from the decomposition as `V S^{-2} V'`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for rank decisions.
pub const RANK_RTOL: f64 = 1e-10;

/// One solved least-squares problem `min ||y - X b||`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coefficients: DVector<f64>,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    /// R² with total sum of squares taken about the mean of `y`.
    pub r_squared: f64,
    /// `(X'X)^{-1}`, valid because rank-deficient designs are rejected.
    pub xtx_inv: DMatrix<f64>,
}

/// Solve `y ~ X` by thin SVD, rejecting rank-deficient designs.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, context: &str) -> Result<LeastSquares> {
    let (n, p) = x.shape();
    assert_eq!(y.len(), n, "design and response row counts differ");
    if n <= p {
        return Err(Error::NotEnoughRows {
            context: context.to_string(),
            rows: n,
            needed: p + 1,
        });
    }

    let svd = x.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let tol = RANK_RTOL * s_max;
    if !(s_max.is_finite()) {
        return Err(Error::Numerical(format!("{context}: SVD produced non-finite singular values")));
    }
    if svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::RankDeficient {
            context: context.to_string(),
            columns: dependent_columns(x, tol),
        });
    }

    let u = svd.u.as_ref().expect("SVD computed with U");
    let v_t = svd.v_t.as_ref().expect("SVD computed with V^T");

    // b = V S^{-1} U' y
    let mut uty = u.transpose() * y;
    for (i, s) in svd.singular_values.iter().enumerate() {
        uty[i] /= s;
    }
    let coefficients = v_t.transpose() * uty;

    // (X'X)^{-1} = V S^{-2} V'
    let mut vs = v_t.transpose();
    for (j, s) in svd.singular_values.iter().enumerate() {
        let inv = 1.0 / s;
        vs.column_mut(j).scale_mut(inv);
    }
    let xtx_inv = &vs * vs.transpose();

    let fitted = x * &coefficients;
    let residuals = y - &fitted;
    let rss = residuals.dot(&residuals);
    let mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let r_squared = if tss > 0.0 { (1.0 - rss / tss).clamp(0.0, 1.0) } else { 0.0 };

    Ok(LeastSquares {
        coefficients,
        fitted,
        residuals,
        r_squared,
        xtx_inv,
    })
}

/// Identify columns linearly dependent on their predecessors.
///
/// Greedy Gram-Schmidt sweep; only used to name columns in error messages
/// after the SVD has already established rank deficiency.
fn dependent_columns(x: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let mut v = DVector::from_column_slice(x.column(j).as_slice());
        let norm_in = v.norm();
        for b in &basis {
            let coef = b.dot(&v);
            v -= b * coef;
        }
        if v.norm() <= tol.max(RANK_RTOL * norm_in) {
            dependent.push(j);
        } else {
            let norm = v.norm();
            basis.push(v / norm);
        }
    }
    dependent
}

/// Prepend a column of ones to `m`.
pub fn with_intercept(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, m.ncols() + 1);
    out.column_mut(0).fill(1.0);
    for j in 0..m.ncols() {
        out.set_column(j + 1, &m.column(j).clone_owned());
    }
    out
}
