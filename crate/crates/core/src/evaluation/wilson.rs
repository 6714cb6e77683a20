use libm::erfc;

use super::EvaluationError;

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

/// Inverse of the standard normal CDF.
///
/// Acklam's rational approximation followed by one Halley step against an
/// erfc-based CDF, which brings the error to around 1e-15.
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;

    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Work in the nearer tail so the residual keeps its relative precision.
    let e = if x <= 0.0 {
        0.5 * erfc(-x / std::f64::consts::SQRT_2) - p
    } else {
        (1.0 - p) - 0.5 * erfc(x / std::f64::consts::SQRT_2)
    };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Two-sided z for a confidence level, e.g. 1.959964 for 0.95.
pub fn z_for_confidence(confidence: f64) -> Result<f64, EvaluationError> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(EvaluationError::Validation(format!(
            "confidence must be in (0, 1), got {confidence}"
        )));
    }
    Ok(normal_quantile(0.5 + confidence / 2.0))
}

/// Wilson score interval for `k` successes out of `n` trials.
pub fn wilson_interval(k: u64, n: u64, confidence: f64) -> Result<(f64, f64), EvaluationError> {
    if n == 0 {
        return Err(EvaluationError::Validation("Wilson interval needs n >= 1".into()));
    }
    if k > n {
        return Err(EvaluationError::Validation(format!("k = {k} exceeds n = {n}")));
    }
    let z = z_for_confidence(confidence)?;
    Ok(wilson_with_z(k as f64, n as f64, z))
}

/// Wilson bounds for a possibly fractional success count.
pub(crate) fn wilson_with_z(k: f64, n: f64, z: f64) -> (f64, f64) {
    let z2 = z * z;
    let denom = n + z2;
    let center = (k + z2 / 2.0) / denom;
    let half = z * (k * (n - k) / n + z2 / 4.0).max(0.0).sqrt() / denom;
    let lo = if k <= 0.0 { 0.0 } else { (center - half).clamp(0.0, 1.0) };
    let hi = if k >= n { 1.0 } else { (center + half).clamp(0.0, 1.0) };
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_reference_points() {
        let q = normal_quantile(0.975);
        assert!((q - 1.959963984540054).abs() < 1e-12, "{q:.17}");
        assert!((normal_quantile(0.5)).abs() < 1e-15);
        assert!((normal_quantile(0.001) + 3.090232306167814).abs() < 1e-11);
        assert!((normal_quantile(0.995) - 2.5758293035489).abs() < 1e-11);
    }

    #[test]
    fn half_of_hundred() {
        let (lo, hi) = wilson_interval(50, 100, 0.95).unwrap();
        assert!((lo - 0.4038315).abs() < 1e-6, "{lo}");
        assert!((hi - 0.5961685).abs() < 1e-6, "{hi}");
    }

    #[test]
    fn boundaries_are_exact() {
        assert_eq!(wilson_interval(0, 10, 0.95).unwrap().0, 0.0);
        assert_eq!(wilson_interval(10, 10, 0.95).unwrap().1, 1.0);
        assert!(wilson_interval(0, 0, 0.95).is_err());
        assert!(wilson_interval(3, 2, 0.95).is_err());
        assert!(wilson_interval(1, 2, 1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn contains_point_estimate(n in 1u64..5000, frac in 0.0f64..=1.0, conf in 0.5f64..0.999) {
                let k = ((n as f64) * frac).round() as u64;
                let (lo, hi) = wilson_interval(k, n, conf).unwrap();
                let p = k as f64 / n as f64;
                prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
            }

            #[test]
            fn narrows_with_more_trials(k in 1u64..50, scale in 2u64..20) {
                let n = 2 * k + 3;
                let (a_lo, a_hi) = wilson_interval(k, n, 0.95).unwrap();
                let (b_lo, b_hi) = wilson_interval(k * scale, n * scale, 0.95).unwrap();
                prop_assert!(b_hi - b_lo < a_hi - a_lo);
            }
        }
    }
}
