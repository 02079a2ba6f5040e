use std::sync::Arc;

use crate::adcore::linalg::lower_inverse_in;
use crate::adcore::{AdError, CustomOp, Tensor, Var};
use crate::par;

/// Relative jitter tried first and the largest one tried.
pub const JITTER_START: f64 = 1e-6;
pub const JITTER_MAX: f64 = 1e-2;

/// Prior mean function of a layer.
#[derive(Clone, Copy, Debug)]
pub enum MeanFn<'t> {
    Zero,
    /// `m(x) = x W` with `W` of shape `[d_in, d_out]`.
    Linear(Var<'t>),
}

impl<'t> MeanFn<'t> {
    /// Mean at `x: [..., n, d_in]`, or `None` for the zero mean.
    pub fn eval(&self, x: Var<'t>) -> Option<Var<'t>> {
        match self {
            MeanFn::Zero => None,
            MeanFn::Linear(w) => Some(x.matmul(*w)),
        }
    }
}

/// Square-root factor of the variational covariance over inducing outputs.
#[derive(Clone, Copy, Debug)]
pub enum QSqrt<'t> {
    /// Positive standard deviations, `[..., d, m]`.
    Diag(Var<'t>),
    /// Lower-triangular factors, `[..., d, m, m]`.
    Full(Var<'t>),
}

/// Marginal means and variances `[..., n, d]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianMarginal<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
}

/// Result of [`conditional`]: the marginal plus the prior Cholesky factor,
/// which [`gauss_kl`] reuses.
#[derive(Clone, Copy, Debug)]
pub struct Conditional<'t> {
    pub marginal: GaussianMarginal<'t>,
    pub luu: Var<'t>,
}

/// Cholesky factor of `K + εI` where `ε` is a multiple of the mean diagonal,
/// escalated tenfold from [`JITTER_START`] to [`JITTER_MAX`] on failure.
pub fn jittered_cholesky(k: Var<'_>) -> Result<Var<'_>, AdError> {
    let shape = k.shape();
    let rank = shape.len();
    let m = shape[rank - 1];
    let tape = k.tape();
    let eye = tape.constant(Tensor::eye(m)).broadcast(shape.clone());
    let mut batch_ones = shape[..rank - 2].to_vec();
    batch_ones.extend([1, 1]);
    let level = k.diag_extract().mean_axis(rank - 2).reshape(batch_ones).broadcast(shape.clone()).mul(eye);
    let mut factor = JITTER_START;
    loop {
        match k.add(level.scale(factor)).cholesky() {
            Ok(l) => return Ok(l),
            Err(e) if factor >= JITTER_MAX * (1.0 - 1e-9) => return Err(e),
            Err(_) => factor *= 10.0,
        }
    }
}

/// `diag((L Lᵀ)⁻¹)` for lower-triangular `l: [..., m, m]`, shape `[..., m]`.
pub fn chol_inverse_diag(l: Var<'_>) -> Var<'_> {
    l.tape().custom(Arc::new(CholInverseDiag), &[l])
}

struct CholInverseDiag;

impl CustomOp for CholInverseDiag {
    fn name(&self) -> &'static str {
        "chol_inverse_diag"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let l = inputs[0];
        let r = l.rank();
        let n = l.shape()[r - 1];
        let mut out = vec![0.0; l.len() / n];
        let ld = l.data();
        par::for_each_chunk_mut(&mut out, n, n * n * n / 6 + 1, |bi, diag| {
            let mut x = vec![0.0; n * n];
            lower_inverse_in(&ld[bi * n * n..(bi + 1) * n * n], &mut x, n);
            for (j, d) in diag.iter_mut().enumerate() {
                *d = (j..n).map(|i| x[i * n + j] * x[i * n + j]).sum();
            }
        });
        Tensor::new(l.shape()[..r - 1].to_vec(), out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        // with X = L⁻¹ and G = diag(ḡ): L̄ = −2 tril(Xᵀ (X G Xᵀ))
        let l = inputs[0];
        let n = l.shape()[l.rank() - 1];
        let (ld, gd) = (l.data(), grad.data());
        let mut out = vec![0.0; l.len()];
        par::for_each_chunk_mut(&mut out, n * n, n * n * n / 3 + 1, |bi, gl| {
            let mut x = vec![0.0; n * n];
            lower_inverse_in(&ld[bi * n * n..(bi + 1) * n * n], &mut x, n);
            let g = &gd[bi * n..(bi + 1) * n];
            let mut p = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..=i {
                    let v: f64 = (0..=k).map(|j| x[i * n + j] * g[j] * x[k * n + j]).sum();
                    p[i * n + k] = v;
                    p[k * n + i] = v;
                }
            }
            for a in 0..n {
                for b in 0..=a {
                    let v: f64 = (a..n).map(|c| x[c * n + a] * p[c * n + b]).sum();
                    gl[a * n + b] = -2.0 * v;
                }
            }
        });
        vec![Some(Tensor::new(l.shape().to_vec(), out))]
    }
}

fn sum_last_two(x: Var<'_>) -> Var<'_> {
    let r = x.shape().len();
    x.sum_axis(r - 1).sum_axis(r - 2)
}

fn expand_to(x: Var<'_>, axis: usize, extent: usize) -> Var<'_> {
    let mut shape = x.shape();
    shape.insert(axis, 1);
    let mut full = shape.clone();
    full[axis] = extent;
    x.reshape(shape).broadcast(full)
}

/// Marginals of `q(f) = ∫ p(f|u) q(u) du` for an unwhitened `q(u)`.
///
/// Shapes (`...` is any shared batch prefix):
/// `kff_diag [..., n]`, `kfu [..., n, m]`, `kuu [..., m, m]`,
/// `q_mu [..., d, m]`, `mean_f [..., n, d]`, `mean_u [..., d, m]`.
pub fn conditional<'t>(
    mean_f: Option<Var<'t>>,
    kff_diag: Var<'t>,
    kfu: Var<'t>,
    kuu: Var<'t>,
    q_mu: Var<'t>,
    q_sqrt: QSqrt<'t>,
    mean_u: Option<Var<'t>>,
) -> Result<Conditional<'t>, AdError> {
    let luu = jittered_cholesky(kuu)?;
    let a = luu.tri_solve_lower(kfu.transpose());
    let p = luu.transpose().tri_solve_upper(a);
    let rank = a.shape().len();
    let d = q_mu.shape()[rank - 2];

    let centered = match mean_u {
        Some(mu) => q_mu.sub(mu),
        None => q_mu,
    };
    let mut mean = centered.matmul(p).transpose();
    if let Some(mf) = mean_f {
        mean = mean.add(mf);
    }

    let prior_var = kff_diag.sub(a.square().sum_axis(rank - 2));
    let correction = match q_sqrt {
        QSqrt::Diag(s) => s.square().matmul(p.square()),
        QSqrt::Full(s) => {
            let pd = expand_to(p, rank - 2, d);
            s.transpose().matmul(pd).square().sum_axis(rank - 1)
        }
    };
    let var = expand_to(prior_var, rank - 1, d).add(correction.transpose());
    Ok(Conditional { marginal: GaussianMarginal { mean, var }, luu })
}

/// `KL(N(q_mu, SSᵀ) ‖ N(p_mean, LLᵀ))` summed over the `d` output rows.
///
/// `q_mu [..., d, m]`, `p_chol [..., m, m]`; returns shape `[...]`.
pub fn gauss_kl<'t>(q_mu: Var<'t>, q_sqrt: QSqrt<'t>, p_mean: Option<Var<'t>>, p_chol: Var<'t>) -> Var<'t> {
    let shape = q_mu.shape();
    let rank = shape.len();
    let (d, m) = (shape[rank - 2], shape[rank - 1]);

    let trace = match q_sqrt {
        QSqrt::Diag(s) => {
            let kinv_diag = chol_inverse_diag(p_chol);
            sum_last_two(s.square().mul(expand_to(kinv_diag, rank - 2, d)))
        }
        QSqrt::Full(s) => {
            let l = expand_to(p_chol, rank - 2, d);
            let ls = l.tri_solve_lower(s);
            sum_last_two(ls.square()).sum_axis(rank - 2)
        }
    };
    let diff = match p_mean {
        Some(pm) => q_mu.sub(pm),
        None => q_mu,
    };
    let maha = sum_last_two(p_chol.tri_solve_lower(diff.transpose()).square());
    let logdet_p = p_chol.logdet_from_chol().scale(d as f64);
    let logdet_q = match q_sqrt {
        QSqrt::Diag(s) => s.square().log().sum_axis(rank - 1).sum_axis(rank - 2),
        QSqrt::Full(s) => s.logdet_from_chol().sum_axis(rank - 2),
    };
    trace.add(maha).shift(-((d * m) as f64)).add(logdet_p).sub(logdet_q).scale(0.5)
}
