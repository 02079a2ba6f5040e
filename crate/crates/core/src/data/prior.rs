//! Draws from composed GP priors on a 1-d grid.

use crate::adcore::linalg::{cholesky, matmul, transpose, tri_solve, Triangle};
use crate::adcore::Tensor;
use crate::error::{Error, Result};
use crate::gpmath::{matern52_matrix, matern52_value, KernelParams, JITTER_MAX, JITTER_START};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// Shared inducing points evenly covering the grid range.
    Conventional,
    /// Per-input inducing points `z = h + b_m` with values from a random
    /// network of the input.
    Amortized,
}

#[derive(Debug, Clone, Serialize)]
pub struct PriorPaths {
    pub grid: Vec<f64>,
    /// `paths[l][p]` is path `p` after `l + 1` layers.
    pub paths: Vec<Vec<Vec<f64>>>,
    /// Median over paths of the median absolute first difference, per depth.
    pub statistic: Vec<f64>,
}

const HIDDEN: usize = 32;
const OFFSET_STD: f64 = 0.5;

/// Lower factor of `k` with the escalating jitter schedule.
fn chol_jittered(k: &Tensor) -> Result<Tensor> {
    let n = k.shape()[0];
    let mean_diag = (0..n).map(|i| k.data()[i * n + i]).sum::<f64>() / n as f64;
    let mut jitter = JITTER_START;
    loop {
        let mut kj = k.clone();
        for i in 0..n {
            kj.data_mut()[i * n + i] += jitter * mean_diag;
        }
        match cholesky(&kj) {
            Ok(l) => return Ok(l),
            Err(e) if jitter >= JITTER_MAX * (1.0 - 1e-9) => {
                return Err(Error::Decomposition { layer: 0, datapoint: None, pivot: e.pivot })
            }
            Err(_) => jitter *= 10.0,
        }
    }
}

fn column(v: &[f64]) -> Tensor {
    Tensor::matrix(v.len(), 1, v.to_vec())
}

/// One conventional layer: `u ~ N(0, K_uu)` shared by all inputs, then
/// `f(h) ~ N(K(h, Z) K_uu⁻¹ u, k(h, h) − K(h, Z) K_uu⁻¹ K(Z, h))` per input.
fn conventional_layer(h: &[f64], z: &Tensor, l: &Tensor, rng: &mut Rng) -> Vec<f64> {
    let m = z.shape()[0];
    let eps = rng.normal_tensor(vec![m, 1]);
    // K_uu⁻¹ L ε = L⁻ᵀ ε
    let alpha = tri_solve(l, &eps, Triangle::Lower, true);
    let kfu = matern52_matrix(&column(h), z, KernelParams::default());
    let mean = matmul(&kfu, &alpha, false, false).into_data();
    // rows of L⁻¹ K(Z, h) give the explained variance
    let proj = tri_solve(l, &transpose(&kfu), Triangle::Lower, false);
    let n = h.len();
    (0..n)
        .map(|i| {
            let explained: f64 = (0..m).map(|k| proj.data()[k * n + i].powi(2)).sum();
            mean[i] + (1.0 - explained).max(0.0).sqrt() * rng.normal()
        })
        .collect()
}

/// One amortized layer with inducing points `Z_h = h + b` and values
/// `u_h = L g(h)` for a random network `g`. The offsets make `K_uu` and
/// `k(h, Z_h)` independent of `h`, so the conditional mean reduces to
/// `aᵀ g(h)` and the conditional variance to a constant.
fn amortized_layer(h: &[f64], m: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let params = KernelParams::default();
    let b: Vec<f64> = (0..m).map(|_| OFFSET_STD * rng.normal()).collect();
    let kuu = matern52_matrix(&column(&b), &column(&b), params);
    let l = chol_jittered(&kuu)?;
    let k0 = Tensor::matrix(m, 1, b.iter().map(|bm| matern52_value(bm.abs(), 1.0, 1.0)).collect());
    // a = L⁻¹ k(h, Z_h) so that f = k Kuu⁻¹ L g = aᵀ g
    let a = tri_solve(&l, &k0, Triangle::Lower, false).into_data();
    let w1: Vec<f64> = (0..HIDDEN).map(|_| rng.normal()).collect();
    let b1: Vec<f64> = (0..HIDDEN).map(|_| rng.normal()).collect();
    let scale = (0.5 * HIDDEN as f64).sqrt().recip();
    let w2: Vec<f64> = (0..m * HIDDEN).map(|_| scale * rng.normal()).collect();
    // fold the output layer into one weight per hidden unit
    let v: Vec<f64> = (0..HIDDEN).map(|j| (0..m).map(|k| a[k] * w2[k * HIDDEN + j]).sum()).collect();
    let resid = (1.0 - a.iter().map(|v| v * v).sum::<f64>()).max(0.0).sqrt();
    Ok(h.iter()
        .map(|&x| (0..HIDDEN).map(|j| v[j] * (w1[j] * x + b1[j]).tanh()).sum::<f64>() + resid * rng.normal())
        .collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn roughness(path: &[f64]) -> f64 {
    median(path.windows(2).map(|w| (w[1] - w[0]).abs()).collect())
}

/// Samples `n_paths` compositions of up to `depth` zero-mean Matérn-5/2
/// layers (unit lengthscale and variance) on `grid`.
pub fn sample_prior_paths(
    grid: &[f64],
    depth: usize,
    mode: PriorMode,
    m: usize,
    seed: u64,
    n_paths: usize,
) -> Result<PriorPaths> {
    if grid.len() < 2 || depth == 0 || m == 0 || n_paths == 0 {
        return Err(Error::Config("prior sampling needs a grid of ≥ 2 points and positive depth, M and paths".into()));
    }
    let mut rng = Rng::new(seed, crate::rng::stream::INIT);
    let (lo, hi) = grid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let conv = match mode {
        PriorMode::Conventional => {
            let z: Vec<f64> = (0..m)
                .map(|i| if m == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * i as f64 / (m - 1) as f64 })
                .collect();
            let z = column(&z);
            let l = chol_jittered(&matern52_matrix(&z, &z, KernelParams::default()))?;
            Some((z, l))
        }
        PriorMode::Amortized => None,
    };
    let mut paths = vec![Vec::with_capacity(n_paths); depth];
    for _ in 0..n_paths {
        let mut h = grid.to_vec();
        for layer_paths in paths.iter_mut() {
            h = match &conv {
                Some((z, l)) => conventional_layer(&h, z, l, &mut rng),
                None => amortized_layer(&h, m, &mut rng)?,
            };
            layer_paths.push(h.clone());
        }
    }
    let statistic = paths.iter().map(|ps| median(ps.iter().map(|p| roughness(p)).collect())).collect();
    Ok(PriorPaths { grid: grid.to_vec(), paths, statistic })
}
