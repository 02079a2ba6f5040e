use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use crate::adcore::{CustomOp, Tensor, Var};

/// `½ ln 2π`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Default node count for Bernoulli expectations.
pub const DEFAULT_HERMITE_POINTS: usize = 20;

/// Physicists' Gauss–Hermite nodes and weights for `∫ e^{-t²} f(t) dt`,
/// found by Newton iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_hermite needs at least one node");
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    // ascending order
    x.reverse();
    w.reverse();
    (x, w)
}

/// `E[f(X)]` for `X ~ N(mean, var)` by `n`-point Gauss–Hermite quadrature.
pub fn gauss_hermite_expect(f: impl Fn(f64) -> f64, mean: f64, var: f64, n: usize) -> f64 {
    let (t, w) = gauss_hermite(n);
    let scale = (2.0 * var.max(0.0)).sqrt();
    t.iter().zip(&w).map(|(ti, wi)| wi * f(mean + scale * ti)).sum::<f64>() / PI.sqrt()
}

/// Standard normal CDF.
pub fn probit_value(t: f64) -> f64 {
    0.5 * libm::erfc(-t * FRAC_1_SQRT_2)
}

/// Differentiable standard normal CDF, `½(1 + erf(t/√2))`.
pub fn probit(t: Var<'_>) -> Var<'_> {
    t.scale(FRAC_1_SQRT_2).erf().shift(1.0).scale(0.5)
}

pub fn normal_log_pdf(t: f64) -> f64 {
    -0.5 * t * t - HALF_LN_2PI
}

/// `ln Φ(t)`, accurate in both tails.
pub fn log_ndtr_value(t: f64) -> f64 {
    if t > 5.0 {
        (-0.5 * libm::erfc(t * FRAC_1_SQRT_2)).ln_1p()
    } else if t > -20.0 {
        (0.5 * libm::erfc(-t * FRAC_1_SQRT_2)).ln()
    } else {
        // asymptotic series of Mills' ratio
        let t2 = 1.0 / (t * t);
        let series = 1.0 - t2 * (1.0 - 3.0 * t2 * (1.0 - 5.0 * t2 * (1.0 - 7.0 * t2)));
        normal_log_pdf(t) - (-t).ln() + series.ln()
    }
}

/// `φ(t)/Φ(t)`, the derivative of `ln Φ`.
fn inverse_mills(t: f64) -> f64 {
    (normal_log_pdf(t) - log_ndtr_value(t)).exp()
}

struct LogNdtr;

impl CustomOp for LogNdtr {
    fn name(&self) -> &'static str {
        "log_ndtr"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].map(log_ndtr_value)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.zip_map(inputs[0], |g, t| g * inverse_mills(t)))]
    }
}

/// Differentiable `ln Φ(t)`.
pub fn log_ndtr(t: Var<'_>) -> Var<'_> {
    t.tape().custom(Arc::new(LogNdtr), &[t])
}
