//! Paired two-sided t-test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub t: f64,
    pub p: f64,
    pub n: usize,
    /// The differences have zero variance; `t` is 0 or infinite and `p` is
    /// 1 or 0 by convention.
    pub degenerate: bool,
}

/// Two-sided paired t-test of `a` against `b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "paired test needs two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if var <= (f64::EPSILON * scale).powi(2) {
        let zero = mean.abs() <= f64::EPSILON * scale;
        return Ok(PairedTest {
            t: if zero { 0.0 } else { mean.signum() * f64::INFINITY },
            p: if zero { 1.0 } else { 0.0 },
            n,
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(PairedTest {
        t,
        p: two_sided_p(t, (n - 1) as f64),
        n,
        degenerate: false,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

pub fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, nine coefficients
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(x, a, b) / a
    } else {
        1.0 - front * beta_cf(1.0 - x, b, a) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz.
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const TOL: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < TOL {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn identical_and_shifted() {
        let b = [1.0, 2.5, -0.3, 4.0];
        let same = paired_t_test(&b, &b).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        let a: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
        let shifted = paired_t_test(&a, &b).unwrap();
        assert!(shifted.degenerate);
        assert_eq!(shifted.p, 0.0);
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn fixed_fixture_matches_reference_cdf() {
        let a = [5.2, 4.8, 6.1, 5.5, 4.9, 5.8, 6.3, 5.0, 5.7, 6.0];
        let b = [4.9, 4.7, 5.6, 5.6, 4.4, 5.1, 6.0, 5.1, 5.2, 5.5];
        let r = paired_t_test(&a, &b).unwrap();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let m = d.iter().sum::<f64>() / 10.0;
        let s = (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 9.0).sqrt();
        let t_ref = m / (s / 10f64.sqrt());
        let dist = StudentsT::new(0.0, 1.0, 9.0).unwrap();
        let p_ref = 2.0 * (1.0 - dist.cdf(t_ref.abs()));
        assert!((r.t - t_ref).abs() < 1e-4);
        assert!((r.p - p_ref).abs() < 1e-4, "{} vs {p_ref}", r.p);
        assert_eq!(r.n, 10);
    }

    #[test]
    fn table_values() {
        // two-sided 5% critical values
        assert!((two_sided_p(2.262_157, 9.0) - 0.05).abs() < 1e-6);
        assert!((two_sided_p(1.959_964, 1e7) - 0.05).abs() < 1e-5);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn p_matches_statrs(t in -12.0f64..12.0, df in 1u32..60) {
            let dist = StudentsT::new(0.0, 1.0, df as f64).unwrap();
            let reference = 2.0 * dist.sf(t.abs());
            prop_assert!((two_sided_p(t, df as f64) - reference).abs() < 1e-6);
        }
    }
}
