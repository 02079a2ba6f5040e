//! Dense reference implementations used as test oracles.

use crate::gpmath::{matern52_value, JITTER_START};

pub fn inverse(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i * n + c].abs().total_cmp(&m[j * n + c].abs())).unwrap();
        for k in 0..n {
            m.swap(c * n + k, p * n + k);
            inv.swap(c * n + k, p * n + k);
        }
        let d = m[c * n + c];
        for k in 0..n {
            m[c * n + k] /= d;
            inv[c * n + k] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = m[r * n + c];
                for k in 0..n {
                    m[r * n + k] -= f * m[c * n + k];
                    inv[r * n + k] -= f * inv[c * n + k];
                }
            }
        }
    }
    inv
}

pub fn det(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i * n + c].abs().total_cmp(&m[j * n + c].abs())).unwrap();
        if p != c {
            for k in 0..n {
                m.swap(c * n + k, p * n + k);
            }
            d = -d;
        }
        d *= m[c * n + c];
        for r in c + 1..n {
            let f = m[r * n + c] / m[c * n + c];
            for k in c..n {
                m[r * n + k] -= f * m[c * n + k];
            }
        }
    }
    d
}

pub fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            c[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
        }
    }
    c
}

pub fn tr(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            t[j * n + i] = a[i * m + j];
        }
    }
    t
}

pub fn gram(x1: &[f64], x2: &[f64], d: usize, ell: f64, var: f64) -> Vec<f64> {
    let (n, m) = (x1.len() / d, x2.len() / d);
    let mut k = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let r = (0..d).map(|c| (x1[i * d + c] - x2[j * d + c]).powi(2)).sum::<f64>().sqrt();
            k[i * m + j] = matern52_value(r, ell, var);
        }
    }
    k
}

pub fn with_jitter(k: &[f64], m: usize) -> Vec<f64> {
    let mean_diag = (0..m).map(|i| k[i * m + i]).sum::<f64>() / m as f64;
    let mut out = k.to_vec();
    for i in 0..m {
        out[i * m + i] += JITTER_START * mean_diag;
    }
    out
}

/// Closed-form Gaussian KL summed over `d` rows, via explicit inverses.
pub fn dense_kl(q_mu: &[f64], sigma: &[Vec<f64>], p_mean: &[f64], k: &[f64], d: usize, m: usize) -> f64 {
    let kinv = inverse(k, m);
    let ldk = det(k, m).ln();
    (0..d)
        .map(|dd| {
            let diff: Vec<f64> = (0..m).map(|j| p_mean[dd * m + j] - q_mu[dd * m + j]).collect();
            let tr_term: f64 = mm(&kinv, &sigma[dd], m, m, m).iter().step_by(m + 1).sum();
            let maha = mm(&mm(&diff, &kinv, 1, m, m), &diff, 1, m, 1)[0];
            0.5 * (tr_term + maha - m as f64 + ldk - det(&sigma[dd], m).ln())
        })
        .sum()
}

/// Unwhitened sparse-GP marginal of one output, `q_mu`, `sigma` over `m`
/// inducing outputs with prior covariance `kuu` (jitter already included).
pub fn dense_marginal(
    kff: &[f64],
    kfu: &[f64],
    kuu: &[f64],
    q_mu: &[f64],
    sigma: &[f64],
    n: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>) {
    let kinv = inverse(kuu, m);
    let proj = mm(kfu, &kinv, n, m, m);
    let mean = mm(&proj, q_mu, n, m, 1);
    let red = mm(&proj, &tr(kfu, n, m), n, m, n);
    let corr = mm(&mm(&proj, sigma, n, m, m), &tr(&proj, n, m), n, m, n);
    let var = (0..n).map(|i| kff[i] - red[i * n + i] + corr[i * n + i]).collect();
    (mean, var)
}

/// `ln N(y | 0, K + noise·I)` via explicit inverse and determinant.
pub fn gp_log_marginal(k: &[f64], y: &[f64], noise: f64) -> f64 {
    let n = y.len();
    let mut c = k.to_vec();
    for i in 0..n {
        c[i * n + i] += noise;
    }
    let cinv = inverse(&c, n);
    let quad = mm(&mm(y, &cinv, 1, n, n), y, 1, n, 1)[0];
    -0.5 * quad - 0.5 * det(&c, n).ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}
