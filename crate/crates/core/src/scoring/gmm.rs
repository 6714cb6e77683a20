//! Two-component 1-D Gaussian mixture fitted by expectation-maximization,
//! used to locate the impostor and genuine modes of a service's scores.

use serde::{Deserialize, Serialize};

use super::ScoringError;

const MAX_ITER: usize = 200;
const LL_TOLERANCE: f64 = 1e-8;
const MIN_WEIGHT: f64 = 1e-3;
/// Ashman's D below this means the two components overlap into one mode.
const MIN_SEPARATION: f64 = 2.0;

/// Impostor (`low`) and genuine (`high`) modes in native score units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModePair {
    pub low: f64,
    pub high: f64,
}

impl ModePair {
    pub fn new(low: f64, high: f64) -> Result<Self, ScoringError> {
        if !(low.is_finite() && high.is_finite() && low < high) {
            return Err(ScoringError::Validation(format!(
                "modes must satisfy low < high, got ({low}, {high})"
            )));
        }
        Ok(Self { low, high })
    }

    /// Linear map taking `low` to 0 and `high` to 1, clipped to [0, 1].
    pub fn normalize(&self, x: f64) -> f64 {
        ((x - self.low) / (self.high - self.low)).clamp(0.0, 1.0)
    }
}

pub fn normalize_scores(scores: &[f64], modes: &ModePair) -> Vec<f64> {
    scores.iter().map(|&x| modes.normalize(x)).collect()
}

#[derive(Debug, Clone, Copy)]
struct Component {
    weight: f64,
    mean: f64,
    var: f64,
}

impl Component {
    fn log_density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        self.weight.ln() - 0.5 * (2.0 * std::f64::consts::PI * self.var).ln() - d * d / (2.0 * self.var)
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fits the mixture and returns the two component means, ascending.
///
/// Starts from the 10th and 90th percentiles with equal weights and the pooled
/// sample variance. Component variances are floored so that atoms are allowed.
pub fn fit_bimodal_modes(scores: &[f64]) -> Result<ModePair, ScoringError> {
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(ScoringError::Validation("non-finite score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.len() < 2 || sorted[0] == sorted[sorted.len() - 1] {
        return Err(ScoringError::Validation(
            "need at least two distinct scores to fit modes".into(),
        ));
    }
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sample_var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let var_floor = (sample_var * 1e-6).max(1e-300);

    let mut comps = [
        Component {
            weight: 0.5,
            mean: percentile(&sorted, 0.1),
            var: sample_var,
        },
        Component {
            weight: 0.5,
            mean: percentile(&sorted, 0.9),
            var: sample_var,
        },
    ];
    let mut resp = vec![0.0; sorted.len()];
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..MAX_ITER {
        // E-step: responsibility of the upper component, and log-likelihood.
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(&sorted) {
            let a = comps[0].log_density(x);
            let b = comps[1].log_density(x);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            *r = (b - lse).exp();
            ll += lse;
        }
        ll /= n;

        // M-step.
        let w1: f64 = resp.iter().sum();
        let w0 = n - w1;
        if w0 / n < MIN_WEIGHT || w1 / n < MIN_WEIGHT {
            return Err(ScoringError::DegenerateFit(format!(
                "component weight fell to {:.2e}",
                (w0 / n).min(w1 / n)
            )));
        }
        let m1 = resp.iter().zip(&sorted).map(|(r, x)| r * x).sum::<f64>() / w1;
        let m0 = resp.iter().zip(&sorted).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / w0;
        let v1 = resp.iter().zip(&sorted).map(|(r, x)| r * (x - m1).powi(2)).sum::<f64>() / w1;
        let v0 = resp
            .iter()
            .zip(&sorted)
            .map(|(r, x)| (1.0 - r) * (x - m0).powi(2))
            .sum::<f64>()
            / w0;
        comps = [
            Component {
                weight: w0 / n,
                mean: m0,
                var: v0.max(var_floor),
            },
            Component {
                weight: w1 / n,
                mean: m1,
                var: v1.max(var_floor),
            },
        ];
        if (ll - prev_ll).abs() < LL_TOLERANCE {
            break;
        }
        prev_ll = ll;
    }

    let (lo, hi) = if comps[0].mean <= comps[1].mean {
        (comps[0], comps[1])
    } else {
        (comps[1], comps[0])
    };
    let separation = (hi.mean - lo.mean) * (2.0 / (lo.var + hi.var)).sqrt();
    if !(separation >= MIN_SEPARATION) {
        return Err(ScoringError::DegenerateFit(format!(
            "components overlap (separation {separation:.2}); the sample looks unimodal"
        )));
    }
    ModePair::new(lo.mean, hi.mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn planted_mixture_recovers_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let lo = Normal::new(0.1, 0.02).unwrap();
        let hi = Normal::new(0.9, 0.02).unwrap();
        let mut xs: Vec<f64> = (0..250).map(|_| lo.sample(&mut rng)).collect();
        xs.extend((0..250).map(|_| hi.sample(&mut rng)));
        let m = fit_bimodal_modes(&xs).unwrap();
        assert!((m.low - 0.1).abs() <= 0.02, "{m:?}");
        assert!((m.high - 0.9).abs() <= 0.02, "{m:?}");
    }

    #[test]
    fn unbalanced_native_range_mixture() {
        // Impostors dominate and live on a 0-100 scale.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lo = Normal::new(20.0, 6.0).unwrap();
        let hi = Normal::new(90.0, 3.0).unwrap();
        let mut xs: Vec<f64> = (0..800).map(|_| lo.sample(&mut rng)).collect();
        xs.extend((0..200).map(|_| hi.sample(&mut rng)));
        let m = fit_bimodal_modes(&xs).unwrap();
        assert!((m.low - 20.0).abs() < 1.0 && (m.high - 90.0).abs() < 1.0, "{m:?}");
    }

    #[test]
    fn two_atoms() {
        let mut xs = vec![0.2; 50];
        xs.extend(vec![0.8; 50]);
        let m = fit_bimodal_modes(&xs).unwrap();
        assert!((m.low - 0.2).abs() < 1e-9 && (m.high - 0.8).abs() < 1e-9, "{m:?}");
    }

    #[test]
    fn unimodal_sample_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Normal::new(0.5, 0.1).unwrap();
        let xs: Vec<f64> = (0..500).map(|_| d.sample(&mut rng)).collect();
        assert!(matches!(fit_bimodal_modes(&xs), Err(ScoringError::DegenerateFit(_))));
    }

    #[test]
    fn too_few_distinct_values() {
        assert!(fit_bimodal_modes(&[0.3, 0.3, 0.3]).is_err());
        assert!(fit_bimodal_modes(&[0.3]).is_err());
    }

    #[test]
    fn normalization_examples() {
        let m = ModePair::new(20.0, 90.0).unwrap();
        assert_eq!(m.normalize(90.0), 1.0);
        assert_eq!(m.normalize(5.0), 0.0);
        assert_eq!(m.normalize(120.0), 1.0);
        assert!((m.normalize(55.0) - 0.5).abs() < 1e-12);
        assert!(ModePair::new(3.0, 3.0).is_err());
        assert_eq!(normalize_scores(&[20.0, 90.0], &m), vec![0.0, 1.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, lo in -5.0f64..0.0, span in 0.1f64..5.0) {
                let m = ModePair::new(lo, lo + span).unwrap();
                let (x, y) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(m.normalize(x) <= m.normalize(y));
            }

            #[test]
            fn unit_modes_are_identity_on_unit_interval(x in 0.0f64..=1.0) {
                let m = ModePair::new(0.0, 1.0).unwrap();
                prop_assert_eq!(m.normalize(x), x);
                prop_assert_eq!(m.normalize(m.normalize(x)), m.normalize(x));
            }
        }
    }
}
