//! Scores for mixture predictives: NLL, RMSE, CRPS and error rate.

use crate::deepmodel::MixturePredictive;
use crate::gpmath::HALF_LN_2PI;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Test-set scores on the standardized scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub nll: f64,
    pub rmse: f64,
    pub crps: f64,
    pub error_rate: Option<f64>,
    pub n_test: usize,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `−ln Σ w_s N(y | m_s, v_s + σ²)`.
pub fn mixture_nll(y: f64, weights: &[f64], means: &[f64], vars: &[f64], sigma_obs2: f64) -> f64 {
    let terms: Vec<f64> = weights
        .iter()
        .zip(means)
        .zip(vars)
        .map(|((&w, &m), &v)| {
            let s2 = v + sigma_obs2;
            w.ln() - HALF_LN_2PI - 0.5 * s2.ln() - 0.5 * (y - m) * (y - m) / s2
        })
        .collect();
    -log_sum_exp(&terms)
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `E|X|` for `X ~ N(mu, var)`.
fn abs_moment(mu: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return mu.abs();
    }
    let s = var.sqrt();
    let z = mu / s;
    2.0 * s * std_normal_pdf(z) + mu * (2.0 * std_normal_cdf(z) - 1.0)
}

/// Closed-form CRPS of a Gaussian mixture with standard deviations `sigmas`
/// at observation `x`.
pub fn crps_mixture(x: f64, weights: &[f64], means: &[f64], sigmas: &[f64]) -> f64 {
    let n = weights.len();
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..n {
        first += weights[i] * abs_moment(x - means[i], sigmas[i] * sigmas[i]);
        for j in 0..n {
            let v = sigmas[i] * sigmas[i] + sigmas[j] * sigmas[j];
            second += weights[i] * weights[j] * abs_moment(means[i] - means[j], v);
        }
    }
    (first - 0.5 * second).max(0.0)
}

pub fn rmse(y: &[f64], pred: &[f64]) -> f64 {
    assert_eq!(y.len(), pred.len(), "rmse: length mismatch");
    let sse: f64 = y.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum();
    (sse / y.len() as f64).sqrt()
}

/// Fraction of misclassified points; `p = 0.5` predicts class 1.
pub fn error_rate(y: &[f64], p_hat: &[f64]) -> f64 {
    assert_eq!(y.len(), p_hat.len(), "error_rate: length mismatch");
    let wrong = y.iter().zip(p_hat).filter(|(&t, &p)| (p >= 0.5) != (t == 1.0)).count();
    wrong as f64 / y.len() as f64
}

/// Scores a regression predictive against targets `y`.
pub fn score_regression(pred: &MixturePredictive, y: &[f64]) -> ScoreReport {
    assert_eq!(pred.len(), y.len());
    let (mut nll, mut crps) = (0.0, 0.0);
    for (i, &t) in y.iter().enumerate() {
        let (w, m, v) = pred.point(i);
        nll += mixture_nll(t, &w, &m, &v, 0.0);
        let sig: Vec<f64> = v.iter().map(|v| v.max(0.0).sqrt()).collect();
        crps += crps_mixture(t, &w, &m, &sig);
    }
    let n = y.len() as f64;
    ScoreReport { nll: nll / n, rmse: rmse(y, &pred.mean()), crps: crps / n, error_rate: None, n_test: y.len() }
}

/// Scores a probit classifier. The CRPS of a Bernoulli forecast reduces to
/// the Brier score; RMSE is taken between labels and probabilities.
pub fn score_binary(pred: &MixturePredictive, y: &[f64], hermite_points: usize) -> ScoreReport {
    let p = pred.class_probabilities(hermite_points);
    let eps = 1e-12;
    let nll =
        y.iter().zip(&p).map(|(&t, &q)| -if t == 1.0 { q.max(eps).ln() } else { (1.0 - q).max(eps).ln() }).sum::<f64>()
            / y.len() as f64;
    let brier = y.iter().zip(&p).map(|(t, q)| (t - q) * (t - q)).sum::<f64>() / y.len() as f64;
    ScoreReport { nll, rmse: rmse(y, &p), crps: brier, error_rate: Some(error_rate(y, &p)), n_test: y.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn mixture_cdf(y: f64, w: &[f64], m: &[f64], s: &[f64]) -> f64 {
        w.iter()
            .zip(m)
            .zip(s)
            .map(|((w, m), s)| {
                if *s > 0.0 {
                    w * std_normal_cdf((y - m) / s)
                } else if y >= *m {
                    *w
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// Composite Simpson integration of `∫ (F(y) − 1{y ≥ x})² dy`, split at `x`.
    fn crps_numeric(x: f64, w: &[f64], m: &[f64], s: &[f64]) -> f64 {
        let smax = s.iter().cloned().fold(0.0, f64::max).max(1e-3);
        let lo = m.iter().cloned().fold(x, f64::min) - 12.0 * smax;
        let hi = m.iter().cloned().fold(x, f64::max) + 12.0 * smax;
        let simpson = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| {
            let n = 20_000;
            let h = (b - a) / n as f64;
            let mut acc = f(a) + f(b);
            for k in 1..n {
                acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        simpson(lo, x, &|y| mixture_cdf(y, w, m, s).powi(2))
            + simpson(x, hi, &|y| (1.0 - mixture_cdf(y, w, m, s)).powi(2))
    }

    #[test]
    fn standard_normal_nll_at_zero() {
        let v = mixture_nll(0.0, &[1.0], &[0.0], &[1.0], 0.0);
        assert!((v - 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn identical_components_match_single_component() {
        let a = mixture_nll(0.7, &[0.5, 0.5], &[0.2, 0.2], &[0.3, 0.3], 0.1);
        let b = mixture_nll(0.7, &[1.0], &[0.2], &[0.3], 0.1);
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn nll_matches_direct_summation() {
        let mut rng = Rng::new(4, 0);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..3).map(|_| rng.uniform() + 0.1).collect();
            let tot: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|r| r / tot).collect();
            let m: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.uniform() + 0.05).collect();
            let y = rng.normal();
            let direct: f64 = (0..3)
                .map(|k| {
                    let s2 = v[k] + 0.2;
                    w[k] * (-(y - m[k]).powi(2) / (2.0 * s2)).exp() / (2.0 * PI * s2).sqrt()
                })
                .sum();
            let got = mixture_nll(y, &w, &m, &v, 0.2);
            assert!((got + direct.ln()).abs() < 1e-12 * got.abs().max(1.0));
        }
    }

    #[test]
    fn nll_decreases_as_a_mean_approaches_the_target() {
        let mut rng = Rng::new(5, 0);
        for _ in 0..50 {
            let w = [0.3, 0.7];
            let m = [rng.normal(), rng.normal()];
            let v = [rng.uniform() + 0.1, rng.uniform() + 0.1];
            let y = rng.normal() * 2.0;
            for k in 0..2 {
                let mut moved = m;
                moved[k] += 1e-4 * (y - m[k]).signum();
                assert!(mixture_nll(y, &w, &moved, &v, 0.05) < mixture_nll(y, &w, &m, &v, 0.05));
            }
        }
    }

    #[test]
    fn gaussian_crps_at_the_mean() {
        let closed = (2.0 / PI).sqrt() - 1.0 / PI.sqrt();
        assert!((crps_mixture(0.0, &[1.0], &[0.0], &[1.0]) - closed).abs() < 1e-15);
        assert!((crps_numeric(0.0, &[1.0], &[0.0], &[1.0]) - closed).abs() < 1e-8);
        assert!((closed - 0.233695).abs() < 1e-6);
    }

    #[test]
    fn degenerate_forecast_gives_absolute_error() {
        let v = crps_mixture(2.5, &[0.4, 0.6], &[1.0, 1.0], &[0.0, 0.0]);
        assert!((v - 1.5).abs() < 1e-15);
    }

    #[test]
    fn symmetric_mixture_at_center_matches_integration() {
        let (w, m, s) = ([0.5, 0.5], [-1.0, 1.0], [0.5, 0.5]);
        let a = crps_mixture(0.0, &w, &m, &s);
        assert!((a - crps_numeric(0.0, &w, &m, &s)).abs() < 1e-7);
    }

    #[test]
    fn random_mixtures_match_integration() {
        let mut rng = Rng::new(6, 0);
        for _ in 0..50 {
            let k = 1 + rng.below(4) as usize;
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 0.05).collect();
            let tot: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|r| r / tot).collect();
            let m: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
            let s: Vec<f64> = (0..k).map(|_| rng.uniform() + 0.1).collect();
            let x = 1.5 * rng.normal();
            let a = crps_mixture(x, &w, &m, &s);
            assert!((a - crps_numeric(x, &w, &m, &s)).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn crps_is_jointly_shift_invariant(
            x in -3.0f64..3.0, c in -2.0f64..2.0,
            m in proptest::collection::vec(-2.0f64..2.0, 2),
            s in proptest::collection::vec(0.05f64..2.0, 2),
        ) {
            let w = [0.25, 0.75];
            let shifted: Vec<f64> = m.iter().map(|v| v + c).collect();
            let a = crps_mixture(x, &w, &m, &s);
            let b = crps_mixture(x + c, &w, &shifted, &s);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[1.0, -1.0]), 1.0);
        let mut rng = Rng::new(7, 0);
        let y: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
        let p: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
        let mut acc = 0.0;
        for i in 0..100 {
            let d = y[i] - p[i];
            acc += d * d;
        }
        assert!((rmse(&y, &p) - (acc / 100.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(error_rate(&[1.0, 0.0, 1.0], &[0.9, 0.1, 0.7]), 0.0);
        assert_eq!(error_rate(&[0.0, 0.0], &[0.5, 0.5]), 1.0);
        let mut rng = Rng::new(8, 0);
        let y: Vec<f64> = (0..200).map(|_| (rng.uniform() < 0.4) as u8 as f64).collect();
        let p: Vec<f64> = (0..200).map(|_| rng.uniform()).collect();
        let mut wrong = 0;
        for i in 0..200 {
            let class = if p[i] >= 0.5 { 1.0 } else { 0.0 };
            if class != y[i] {
                wrong += 1;
            }
        }
        assert_eq!(error_rate(&y, &p), wrong as f64 / 200.0);
    }
}
