//! Brute-force 2SBMA oracle in exact rational arithmetic.
//!
//! Re-derives every per-subset and averaged quantity from the formulas using
//! `BigRational` linear algebra (Gauss-Jordan inverses, exact R², F and g),
//! dropping to f64 only for logs, the softmax and the chi-square tail (the
//! latter through statrs, independent of the crate's gamma code). Nothing
//! here touches the crate's estimation path.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use miiv::dataset::Dataset;
use miiv::equations::EstimationEquation;
use miiv::model::ParamValue;

type Q = BigRational;
type Mat = Vec<Vec<Q>>;

fn q(x: f64) -> Q {
    BigRational::from_float(x).expect("finite")
}

fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![Q::zero(); c]; r]
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(n, m);
    for i in 0..n {
        for l in 0..k {
            if a[i][l].is_zero() {
                continue;
            }
            for j in 0..m {
                let prod = &a[i][l] * &b[l][j];
                out[i][j] = &out[i][j] + prod;
            }
        }
    }
    out
}

fn transpose(a: &Mat) -> Mat {
    let (n, m) = (a.len(), a[0].len());
    let mut out = zeros(m, n);
    for i in 0..n {
        for j in 0..m {
            out[j][i] = a[i][j].clone();
        }
    }
    out
}

/// Exact Gauss-Jordan inverse; panics on a singular matrix (the toy problem
/// is well conditioned by construction).
fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut work = a.clone();
    let mut inv = zeros(n, n);
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = Q::one();
    }
    for col in 0..n {
        let pivot_row = (col..n).find(|&r| !work[r][col].is_zero()).expect("nonsingular");
        work.swap(col, pivot_row);
        inv.swap(col, pivot_row);
        let pivot = work[col][col].clone();
        for j in 0..n {
            work[col][j] = &work[col][j] / &pivot;
            inv[col][j] = &inv[col][j] / &pivot;
        }
        for r in 0..n {
            if r == col || work[r][col].is_zero() {
                continue;
            }
            let factor = work[r][col].clone();
            for j in 0..n {
                let w = &work[col][j] * &factor;
                work[r][j] = &work[r][j] - w;
                let v = &inv[col][j] * &factor;
                inv[r][j] = &inv[r][j] - v;
            }
        }
    }
    inv
}

fn column(v: &[Q]) -> Mat {
    v.iter().map(|x| vec![x.clone()]).collect()
}

struct ExactLs {
    beta: Vec<Q>,
    fitted: Vec<Q>,
    r2: Q,
    xtx_inv: Mat,
}

/// Exact least squares through the normal equations.
fn exact_ls(x: &Mat, y: &[Q]) -> ExactLs {
    let xt = transpose(x);
    let xtx_inv = inverse(&matmul(&xt, x));
    let xty = matmul(&xt, &column(y));
    let beta_m = matmul(&xtx_inv, &xty);
    let beta: Vec<Q> = beta_m.iter().map(|r| r[0].clone()).collect();
    let fitted_m = matmul(x, &beta_m);
    let fitted: Vec<Q> = fitted_m.iter().map(|r| r[0].clone()).collect();
    let rss: Q = y.iter().zip(&fitted).map(|(a, b)| {
        let r = a - b;
        &r * &r
    }).sum();
    let n = Q::from_integer(BigInt::from(y.len()));
    let mean: Q = y.iter().sum::<Q>() / &n;
    let tss: Q = y.iter().map(|v| (v - &mean) * (v - &mean)).sum();
    let r2 = if tss.is_zero() { Q::zero() } else { Q::one() - rss / tss };
    ExactLs { beta, fitted, r2, xtx_inv }
}

fn with_ones(cols: &[Vec<Q>]) -> Mat {
    let n = cols[0].len();
    let mut out = zeros(n, cols.len() + 1);
    for row in out.iter_mut() {
        row[0] = Q::one();
    }
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            out[i][j + 1] = col[i].clone();
        }
    }
    out
}

pub struct OracleSubset {
    pub subset: Vec<String>,
    pub r2: f64,
    pub g: f64,
    pub log_bf: f64,
    pub pi: f64,
    pub theta: Vec<f64>,
    pub var_theta: Vec<f64>,
    pub sargan_p: f64,
}

pub struct Oracle2Sbma {
    pub subsets: Vec<OracleSubset>,
    pub theta_bma: Vec<f64>,
    pub var_bma: Vec<f64>,
    pub bma_sargan_p: f64,
    pub is_sargan_p: BTreeMap<String, f64>,
    pub inclusion: BTreeMap<String, f64>,
}

/// Fixed n = 50 toy problem with three instruments of mixed strength.
pub fn toy_problem() -> (Dataset, EstimationEquation) {
    // Linear-congruential integers, scaled to two decimals; both routes see
    // bitwise identical f64 values.
    let mut state: u64 = 12345;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) % 201) as f64 / 100.0 - 1.0 // in [-1, 1]
    };
    let n = 50;
    let names = ["y", "z", "v1", "v2", "v3"];
    let mut m = DMatrix::zeros(n, names.len());
    for i in 0..n {
        let f = next();
        let v1 = f + 0.4 * next();
        let v2 = f + 0.7 * next();
        let v3 = 0.4 * f + next();
        let z = f + 0.5 * next();
        let y = 0.3 + 1.4 * z + 0.6 * next();
        for (j, v) in [y, z, v1, v2, v3].into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    let data = Dataset::new(names.iter().map(|s| s.to_string()).collect(), m).unwrap();
    let eq = EstimationEquation {
        id: 0,
        outcome: "y".to_string(),
        regressors: vec!["z".to_string()],
        coefficient_params: vec![ParamValue::Free("theta".to_string())],
        disturbance: vec![],
        miivs: vec!["v1".to_string(), "v2".to_string(), "v3".to_string()],
    };
    (data, eq)
}

/// Exhaustive 2SBMA on the toy problem by the direct formulas.
pub fn oracle_2sbma(data: &Dataset, eq: &EstimationEquation) -> Oracle2Sbma {
    let n = data.n_rows();
    let to_q = |name: &str| -> Vec<Q> {
        data.column(name).unwrap().iter().map(|&v| q(v)).collect()
    };
    let y = to_q(&eq.outcome);
    let z = to_q(&eq.regressors[0]);

    // all subsets of size 2..=3, lexicographic
    let mut subsets: Vec<Vec<String>> = Vec::new();
    let v = &eq.miivs;
    for a in 0..v.len() {
        for b in (a + 1)..v.len() {
            subsets.push(vec![v[a].clone(), v[b].clone()]);
            for c in (b + 1)..v.len() {
                subsets.push(vec![v[a].clone(), v[b].clone(), v[c].clone()]);
            }
        }
    }
    subsets.sort();

    let nq = Q::from_integer(BigInt::from(n));
    let mut rows: Vec<OracleSubset> = Vec::new();
    for subset in &subsets {
        let cols: Vec<Vec<Q>> = subset.iter().map(|s| to_q(s)).collect();
        let vd = with_ones(&cols);
        let zd = with_ones(std::slice::from_ref(&z));

        // first stage: z on [1 | V]
        let first = exact_ls(&vd, &z);
        let r2 = first.r2.clone();
        let p = subset.len();
        let pq = Q::from_integer(BigInt::from(p));
        let dfq = Q::from_integer(BigInt::from(n - 1 - p));
        let f_stat = (&r2 / &pq) / ((Q::one() - &r2) / &dfq);
        let g = if f_stat > Q::one() { f_stat - Q::one() } else { Q::zero() };

        let gf = g.to_f64().unwrap();
        let r2f = r2.to_f64().unwrap();
        let log_bf = 0.5 * ((n - p - 1) as f64) * gf.ln_1p()
            - 0.5 * ((n - 1) as f64) * (gf * (1.0 - r2f)).ln_1p();

        // zhat = [1 | fitted]; second stage y on zhat
        let zhat = with_ones(std::slice::from_ref(&first.fitted));
        let second = exact_ls(&zhat, &y);
        let theta = second.beta.clone();
        let resid: Vec<Q> = {
            let fitted = matmul(&zd, &column(&theta));
            y.iter().zip(fitted.iter()).map(|(a, b)| a - &b[0]).collect()
        };
        let rss: Q = resid.iter().map(|r| r * r).sum();
        let sigma2 = &rss / Q::from_integer(BigInt::from(n - 1 - 1));
        let var_theta: Vec<f64> = (0..theta.len())
            .map(|i| (&sigma2 * &second.xtx_inv[i][i]).to_f64().unwrap())
            .collect();

        // Sargan: residuals on [1 | V]
        let aux = exact_ls(&vd, &resid);
        let stat = (&nq * &aux.r2).to_f64().unwrap();
        let df = p - 1;
        let sargan_p = ChiSquared::new(df as f64).unwrap().sf(stat);

        rows.push(OracleSubset {
            subset: subset.clone(),
            r2: r2.to_f64().unwrap(),
            g: g.to_f64().unwrap(),
            log_bf,
            pi: 0.0,
            theta: theta.iter().map(|t| t.to_f64().unwrap()).collect(),
            var_theta,
            sargan_p,
        });
    }

    let max = rows.iter().map(|r| r.log_bf).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = rows.iter().map(|r| (r.log_bf - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for (row, w) in rows.iter_mut().zip(&weights) {
        row.pi = w / total;
    }

    let k = 2;
    let mut theta_bma = vec![0.0; k];
    for r in &rows {
        for (avg, t) in theta_bma.iter_mut().zip(&r.theta) {
            *avg += r.pi * t;
        }
    }
    let mut var_bma = vec![0.0; k];
    for r in &rows {
        for (i, v) in var_bma.iter_mut().enumerate() {
            let dev = r.theta[i] - theta_bma[i];
            *v += r.pi * r.var_theta[i] + r.pi * dev * dev;
        }
    }
    let bma_sargan_p = rows.iter().map(|r| r.pi * r.sargan_p).sum();

    let mut is_sargan_p = BTreeMap::new();
    let mut inclusion = BTreeMap::new();
    for qname in v {
        let mass: f64 =
            rows.iter().filter(|r| r.subset.contains(qname)).map(|r| r.pi).sum();
        let acc: f64 = rows
            .iter()
            .filter(|r| r.subset.contains(qname))
            .map(|r| r.pi * r.sargan_p)
            .sum();
        is_sargan_p.insert(qname.clone(), acc / mass);
        inclusion.insert(qname.clone(), mass);
    }

    Oracle2Sbma { subsets: rows, theta_bma, var_bma, bma_sargan_p, is_sargan_p, inclusion }
}
