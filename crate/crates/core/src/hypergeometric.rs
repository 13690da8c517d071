//! `₂F₂(1, 1; 3/2, 2; z)`.

use crate::error::{Error, Result};

/// Term cap of the power series.
pub const MAX_TERMS: usize = 10_000;

/// `₂F₂(1, 1; 3/2, 2; z)` to relative tolerance `tol`.
///
/// For `z ≥ −1` the power series is summed directly. For more negative `z`
/// the alternating series cancels catastrophically, so the equivalent
/// positive form
///
/// ```text
/// ₂F₂(1, 1; 3/2, 2; −x) = (1/x) Σ_{n≥0} P(n+1, x) / (2n+1)
/// ```
///
/// is used instead, with `P` the regularized lower incomplete gamma function
/// (a Poisson tail probability).
pub fn hyp2f2(z: f64, tol: f64) -> Result<f64> {
    if !(tol > 0.0) || !z.is_finite() {
        return Err(Error::InvalidParameter(format!("need finite z and tol > 0 (z = {z}, tol = {tol})")));
    }
    if z >= -1.0 {
        series(z, tol)
    } else {
        poisson_form(-z, tol)
    }
}

fn series(z: f64, tol: f64) -> Result<f64> {
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 0..MAX_TERMS {
        let nf = n as f64;
        // (1)_n (1)_n / ((3/2)_n (2)_n n!) ratio of successive terms.
        term *= (nf + 1.0) * z / ((nf + 1.5) * (nf + 2.0));
        sum += term;
        if term.abs() < tol * sum.abs() && nf + 1.0 > z.abs() {
            return Ok(sum);
        }
    }
    Err(Error::Precision { terms: MAX_TERMS })
}

fn poisson_form(x: f64, tol: f64) -> Result<f64> {
    // Poisson(x) pmf in log space up to a cutoff well past the bulk, then
    // tail sums P(n+1, x) = Σ_{k>n} pmf(k) accumulated from the back.
    let cutoff_log = tol.ln() - 10.0;
    let cap = MAX_TERMS + 2 * x.ceil() as usize;
    let mut pmf = Vec::new();
    let mut lp = -x;
    let lx = x.ln();
    for k in 0.. {
        if k >= cap {
            return Err(Error::Precision { terms: cap });
        }
        if k > 0 {
            lp += lx - (k as f64).ln();
        }
        pmf.push(lp.exp());
        if k as f64 > x && lp < cutoff_log {
            break;
        }
    }
    let mut tail = 0.0;
    let mut sum = 0.0;
    for n in (0..pmf.len()).rev() {
        // tail = Σ_{k>n} pmf(k)
        sum += tail / (2 * n + 1) as f64;
        tail += pmf[n];
    }
    Ok(sum / x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `(2/b²) ∫₀ᵇ ∫₀ʸ exp(−k(y² − x²)) dx dy` with `z = −k b²`, by nested
    /// composite Simpson.
    fn quadrature(z: f64) -> f64 {
        let b = 1.0;
        let k = -z;
        let n = 2000;
        let simpson = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64| {
            let h = (hi - lo) / n as f64;
            let mut s = f(lo) + f(hi);
            for i in 1..n {
                s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let outer = |y: f64| simpson(&|x: f64| (-k * (y * y - x * x)).exp(), 0.0, y);
        2.0 / (b * b) * simpson(&outer, 0.0, b)
    }

    #[test]
    fn at_zero() {
        assert_eq!(hyp2f2(0.0, 1e-15).unwrap(), 1.0);
    }

    #[test]
    fn at_one_tenth() {
        // Independent summation with exact rational coefficients.
        let mut sum = 0.0;
        let mut coef = 1.0;
        for n in 0..60 {
            sum += coef * 0.1f64.powi(n);
            let nf = n as f64;
            coef *= (nf + 1.0) / ((nf + 1.5) * (nf + 2.0));
        }
        let v = hyp2f2(0.1, 1e-15).unwrap();
        assert!((v - sum).abs() < 1e-14);
        assert!((v - 1.034_241_613_664_74).abs() < 1e-13);
    }

    #[test]
    fn deep_negative_reference() {
        // Reference value from an arbitrary-precision evaluation.
        let v = hyp2f2(-175.0, 1e-15).unwrap();
        assert!((v - 0.020_358_361_410_815_8).abs() < 1e-14);
    }

    #[test]
    fn matches_quadrature() {
        for z in [-0.5, -1.0, -1.5, -5.0, -30.0, 0.7, 3.0] {
            let v = hyp2f2(z, 1e-14).unwrap();
            let q = quadrature(z);
            assert!((v - q).abs() < 1e-8 * q.abs().max(1e-3), "z={z}: {v} vs {q}");
        }
    }

    #[test]
    fn branches_agree_near_switch() {
        for z in [-1.0, -1.2, -2.0, -4.0] {
            let a = series(z, 1e-15).unwrap();
            let b = poisson_form(-z, 1e-15).unwrap();
            assert!((a - b).abs() < 1e-12, "z={z}");
        }
    }

    #[test]
    fn quadratic_remainder() {
        for z in [1e-2, 1e-3, -1e-3, -1e-2] {
            let r = hyp2f2(z, 1e-16).unwrap() - (1.0 + z / 3.0);
            // Second coefficient: 2!/((3/2)(5/2) 3!) = 2/15.
            assert!((r / (z * z) - 2.0 / 15.0).abs() < 0.05);
        }
    }

    proptest! {
        #[test]
        fn partial_sums_increase_for_positive_z(z in 0.0f64..20.0) {
            let mut term = 1.0;
            let mut sum = 1.0;
            for n in 0..200 {
                let nf = n as f64;
                term *= (nf + 1.0) * z / ((nf + 1.5) * (nf + 2.0));
                prop_assert!(sum + term >= sum);
                sum += term;
            }
        }

        #[test]
        fn monotone_in_z(z in -300.0f64..30.0, dz in 0.01f64..1.0) {
            prop_assert!(hyp2f2(z + dz, 1e-14).unwrap() > hyp2f2(z, 1e-14).unwrap());
        }
    }
}
