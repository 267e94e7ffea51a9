//! Regularized incomplete gamma functions and the chi-square survival
//! function used by the Sargan tests.

/// Maximum iterations for the series and the continued fraction.
const MAX_ITER: usize = 500;
const EPS: f64 = 1e-16;

/// Upper-tail probability of a chi-square distribution with `df` degrees of
/// freedom at `x`: `Q(df/2, x/2)`.
///
/// `x` must be nonnegative and `df` positive; absolute error is below 1e-12
/// over the range exercised by the test oracle.
pub fn chi_square_upper_tail(x: f64, df: usize) -> f64 {
    assert!(x >= 0.0, "chi-square statistic must be nonnegative, got {x}");
    assert!(df > 0, "degrees of freedom must be positive");
    if x == 0.0 {
        return 1.0;
    }
    if df == 2 {
        // closed form: Q(1, x/2) = exp(-x/2)
        return (-0.5 * x).exp();
    }
    regularized_gamma_q(df as f64 / 2.0, x / 2.0)
}

/// Regularized upper incomplete gamma function Q(a, x) = Γ(a, x)/Γ(a).
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 1.0;
    }
    // Series for P converges fastest left of the mean, continued fraction
    // for Q right of it; computing the dominant piece avoids cancellation.
    if x < a + 1.0 {
        1.0 - lower_series(a, x)
    } else {
        upper_continued_fraction(a, x)
    }
}

/// Regularized lower incomplete gamma function P(a, x) = 1 - Q(a, x).
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        lower_series(a, x)
    } else {
        1.0 - upper_continued_fraction(a, x)
    }
}

fn log_prefactor(a: f64, x: f64) -> f64 {
    a * x.ln() - x - ln_gamma(a)
}

/// P(a,x) by the standard power series sum_{k>=0} x^k / (a (a+1) ... (a+k)).
fn lower_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut denom = a;
    for _ in 0..MAX_ITER {
        denom += 1.0;
        term *= x / denom;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    let log_val = log_prefactor(a, x) + sum.ln();
    log_val.exp().clamp(0.0, 1.0)
}

/// Q(a,x) by the Legendre continued fraction, evaluated with Lentz's method.
fn upper_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    let log_val = log_prefactor(a, x) + h.ln();
    log_val.exp().clamp(0.0, 1.0)
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    #[allow(clippy::excessive_precision)]
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

#[cfg(test)]
#[allow(clippy::excessive_precision)] // frozen oracle values keep all digits
mod tests {
    use super::*;

    #[test]
    fn zero_statistic_has_unit_tail() {
        for df in [1, 2, 5, 30] {
            assert_eq!(chi_square_upper_tail(0.0, df), 1.0);
        }
    }

    #[test]
    fn df_two_closed_form() {
        let p = chi_square_upper_tail(5.0, 2);
        assert!((p - (-2.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn frozen_high_precision_values() {
        // Oracle values evaluated with 50-digit arithmetic.
        let cases = [
            (3.84146, 1, 0.049999964833747424513),
            (5.0, 2, 0.08208499862389879517),
            (14.9, 5, 0.010798278234623294547),
            (0.123, 1, 0.72580325280508960654),
            (27.5, 3, 4.6245196291755561353e-6),
            (1e-8, 4, 0.9999999999999999875),
            (2.3, 11, 0.99713367131407214052),
        ];
        for (x, df, want) in cases {
            let got = chi_square_upper_tail(x, df);
            assert!(
                (got - want).abs() < 1e-12,
                "sf({x}, {df}) = {got}, want {want}"
            );
        }
        // Deep tail stays accurate in relative terms.
        let got = chi_square_upper_tail(250.0, 7);
        assert!((got / 2.770711708247298289e-50 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ln_gamma_matches_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(2.0)).abs() < 1e-14);
        assert!((ln_gamma(6.0) - 120f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn p_and_q_are_complementary() {
        for a in [0.5, 1.5, 4.0, 17.5] {
            for x in [0.01, 0.9, 3.7, 25.0] {
                let p = regularized_gamma_p(a, x);
                let q = regularized_gamma_q(a, x);
                assert!((p + q - 1.0).abs() < 1e-12, "a={a} x={x}");
            }
        }
    }
}
