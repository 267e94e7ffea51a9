//! Reduced-form algebra: model-implied covariance matrices.
//!
//! Every variable (latent or observed) gets one linear equation
//! `x = A x + e`, where rows of `A` hold loadings (indicator rows) and
//! structural coefficients (latent rows), and `e` stacks measurement errors,
//! structural disturbances and exogenous latents' own variation. With
//! `T = (I - A)^{-1}`:
//!
//! ```text
//! Cov(x, x) = T Psi T'        Cov(x, e) = T Psi
//! ```
//!
//! where `Psi = Cov(e)` collects variance parameters and declared error
//! covariances. `Cov(x, e)` is what the instrument search consumes.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ir::{ModelIR, ParamValue};

/// Numeric values for every free parameter of a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamAssignment(pub BTreeMap<String, f64>);

impl ParamAssignment {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn set(&mut self, name: impl Into<String>, value: f64) -> &mut Self {
        self.0.insert(name.into(), value);
        self
    }

    pub fn value_of(&self, param: &ParamValue) -> Result<f64> {
        match param {
            ParamValue::Fixed(v) => Ok(*v),
            ParamValue::Free(name) => self
                .0
                .get(name)
                .copied()
                .ok_or_else(|| Error::MissingParameter { name: name.clone() }),
        }
    }

    /// Check that the assignment covers every free covariance-structure
    /// parameter of `ir` and that variances are positive.
    pub fn validate_for(&self, ir: &ModelIR) -> Result<()> {
        for (name, kind) in ir.free_parameters() {
            let value = self
                .0
                .get(&name)
                .copied()
                .ok_or_else(|| Error::MissingParameter { name: name.clone() })?;
            if matches!(kind, crate::model::ir::ParamKind::Variance) && value <= 0.0 {
                return Err(Error::NonPositiveVariance { name, value });
            }
        }
        Ok(())
    }
}

/// The solved system `T = (I-A)^{-1}` together with `Psi`, at one parameter
/// assignment.
#[derive(Debug, Clone)]
pub struct ReducedForm {
    /// Latents first (IR order), then observed (IR order).
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    t: DMatrix<f64>,
    psi: DMatrix<f64>,
}

impl ReducedForm {
    pub fn build(ir: &ModelIR, params: &ParamAssignment) -> Result<Self> {
        let names: Vec<String> = ir.latents.iter().chain(ir.observed.iter()).cloned().collect();
        let index: BTreeMap<String, usize> =
            names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let dim = names.len();

        let mut a = DMatrix::zeros(dim, dim);
        for l in &ir.loadings {
            a[(index[&l.indicator], index[&l.latent])] = params.value_of(&l.param)?;
        }
        for r in &ir.regressions {
            a[(index[&r.outcome], index[&r.predictor])] = params.value_of(&r.param)?;
        }

        let mut psi = DMatrix::zeros(dim, dim);
        for (i, name) in names.iter().enumerate() {
            psi[(i, i)] = params.value_of(&ir.variance_param(name))?;
        }
        for c in &ir.covariances {
            if c.a == c.b {
                continue; // variances already placed
            }
            let v = params.value_of(&c.param)?;
            let (i, j) = (index[&c.a], index[&c.b]);
            psi[(i, j)] = v;
            psi[(j, i)] = v;
        }

        let i_minus_a = DMatrix::identity(dim, dim) - a;
        let t = i_minus_a.lu().try_inverse().ok_or_else(|| Error::SingularSystem {
            context: "(I - B) is not invertible".to_string(),
        })?;

        Ok(Self { names, index, t, psi })
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Covariance matrix over all variables, exactly symmetric.
    pub fn covariance_of_variables(&self) -> DMatrix<f64> {
        let mut full = &self.t * &self.psi * self.t.transpose();
        symmetrize(&mut full);
        full
    }

    /// Cross-covariance between variables (rows) and error terms (columns);
    /// the error term of variable k sits in column k.
    pub fn covariance_variable_error(&self) -> DMatrix<f64> {
        &self.t * &self.psi
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Model-implied covariance matrix over the observed variables.
#[derive(Debug, Clone)]
pub struct ImpliedCovariance {
    pub names: Vec<String>,
    pub matrix: DMatrix<f64>,
    /// Strict positive definiteness; non-PD results are flagged, not fatal.
    pub positive_definite: bool,
    pub min_eigenvalue: f64,
}

/// Compute the implied covariance of the observed variables at `params`.
pub fn implied_covariance(ir: &ModelIR, params: &ParamAssignment) -> Result<ImpliedCovariance> {
    let rf = ReducedForm::build(ir, params)?;
    let full = rf.covariance_of_variables();
    let k = ir.observed.len();
    let offset = ir.latents.len();
    let mut matrix = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            matrix[(i, j)] = full[(offset + i, offset + j)];
        }
    }

    let eigen = matrix.clone().symmetric_eigen();
    let min_eigenvalue = eigen.eigenvalues.min();
    let max_eigenvalue = eigen.eigenvalues.max();
    let positive_definite = min_eigenvalue > 1e-12 * max_eigenvalue.max(1.0);

    Ok(ImpliedCovariance {
        names: ir.observed.clone(),
        matrix,
        positive_definite,
        min_eigenvalue,
    })
}

/// Copy the upper triangle onto the lower one so symmetry is exact.
fn symmetrize(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            m[(j, i)] = m[(i, j)];
        }
    }
}
