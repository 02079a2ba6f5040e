use std::sync::Arc;

use crate::adcore::{linalg, CustomOp, Tensor, Var};
use crate::par;

const SQRT5: f64 = 2.236_067_977_499_79;

/// Isotropic Matérn-5/2 hyperparameters, stored on the log scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub log_lengthscale: f64,
    pub log_variance: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams { log_lengthscale: 0.0, log_variance: 0.0 }
    }
}

/// `σ²(1 + s + s²/3)e^{-s}` with `s = √5 r/ℓ`.
pub fn matern52_value(r: f64, lengthscale: f64, variance: f64) -> f64 {
    let s = SQRT5 * r / lengthscale;
    variance * (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Dense Matérn-5/2 Gram matrix between the rows of two `[n, d]` tensors.
pub fn matern52_matrix(x1: &Tensor, x2: &Tensor, params: KernelParams) -> Tensor {
    MATERN.forward(&[x1, x2, &Tensor::scalar(params.log_lengthscale), &Tensor::scalar(params.log_variance)])
}

/// Differentiable Matérn-5/2 Gram matrix.
///
/// `x1` is `[..., n, d]` and `x2` is `[..., m, d]`; batch dimensions either
/// agree or one side is a plain matrix. Hyperparameters are rank-0 log values.
pub fn matern52<'t>(x1: Var<'t>, x2: Var<'t>, log_lengthscale: Var<'t>, log_variance: Var<'t>) -> Var<'t> {
    x1.tape().custom(Arc::new(Matern52), &[x1, x2, log_lengthscale, log_variance])
}

static MATERN: Matern52 = Matern52;

struct Matern52;

struct Layout {
    n: usize,
    m: usize,
    d: usize,
    count: usize,
    s1: usize,
    s2: usize,
    dims: Vec<usize>,
}

fn layout(x1: &Tensor, x2: &Tensor) -> Layout {
    let bp = linalg::batch_pair("matern52", x1.shape(), x2.shape());
    let (n, d) = (x1.shape()[x1.rank() - 2], x1.shape()[x1.rank() - 1]);
    let (m, d2) = (x2.shape()[x2.rank() - 2], x2.shape()[x2.rank() - 1]);
    assert_eq!(d, d2, "matern52: input dimensions differ ({:?} vs {:?})", x1.shape(), x2.shape());
    Layout {
        n,
        m,
        d,
        count: bp.count,
        s1: if bp.a_batched { n * d } else { 0 },
        s2: if bp.b_batched { m * d } else { 0 },
        dims: bp.dims,
    }
}

fn scaled_distance(a: &[f64], b: &[f64], inv_ell: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    SQRT5 * r2.sqrt() * inv_ell
}

impl CustomOp for Matern52 {
    fn name(&self) -> &'static str {
        "matern52"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (x1, x2) = (inputs[0], inputs[1]);
        let inv_ell = (-inputs[2].item()).exp();
        let var = inputs[3].item().exp();
        let lay = layout(x1, x2);
        let (n, m, d) = (lay.n, lay.m, lay.d);
        let mut out = vec![0.0; lay.count * n * m];
        let (d1, d2) = (x1.data(), x2.data());
        // K(Z, Z): evaluate one triangle and mirror it
        let sym = std::ptr::eq(x1, x2);
        par::for_each_chunk_mut(&mut out, n * m, n * m * (d + 8), |bi, k| {
            let a = &d1[bi * lay.s1..];
            let b = &d2[bi * lay.s2..];
            for i in 0..n {
                let start = if sym { i } else { 0 };
                for j in start..m {
                    let s = scaled_distance(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d], inv_ell);
                    let v = var * (1.0 + s + s * s / 3.0) * (-s).exp();
                    k[i * m + j] = v;
                    if sym {
                        k[j * m + i] = v;
                    }
                }
            }
        });
        let mut shape = lay.dims;
        shape.extend([n, m]);
        Tensor::new(shape, out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x1, x2) = (inputs[0], inputs[1]);
        let inv_ell = (-inputs[2].item()).exp();
        let var = inputs[3].item().exp();
        let lay = layout(x1, x2);
        let (n, m, d) = (lay.n, lay.m, lay.d);
        let c = -5.0 * var * inv_ell * inv_ell / 3.0;
        let sym = std::ptr::eq(x1, x2);
        let (d1, d2, g) = (x1.data(), x2.data(), grad.data());
        // Per batch entry: [g_x1 (n·d) | g_x2 (m·d) | g_log_ell | g_log_var].
        let width = n * d + m * d + 2;
        let mut parts = vec![0.0; lay.count * width];
        par::for_each_chunk_mut(&mut parts, width, n * m * (2 * d + 10), |bi, buf| {
            let a = &d1[bi * lay.s1..];
            let b = &d2[bi * lay.s2..];
            let gb = &g[bi * n * m..(bi + 1) * n * m];
            let (gx1, rest) = buf.split_at_mut(n * d);
            let (gx2, hyp) = rest.split_at_mut(m * d);
            for i in 0..n {
                let xi = &a[i * d..(i + 1) * d];
                if sym {
                    hyp[1] += gb[i * m + i] * var;
                }
                let start = if sym { i + 1 } else { 0 };
                for j in start..m {
                    // symmetric case: fold (i, j) and (j, i) together
                    let gij = if sym { gb[i * m + j] + gb[j * m + i] } else { gb[i * m + j] };
                    if gij == 0.0 {
                        continue;
                    }
                    let xj = &b[j * d..(j + 1) * d];
                    let s = scaled_distance(xi, xj, inv_ell);
                    let e = (-s).exp();
                    hyp[0] += gij * var * e * s * s * (1.0 + s) / 3.0;
                    hyp[1] += gij * var * (1.0 + s + s * s / 3.0) * e;
                    let w = gij * c * (1.0 + s) * e;
                    for k in 0..d {
                        let diff = w * (xi[k] - xj[k]);
                        gx1[i * d + k] += diff;
                        if sym {
                            gx1[j * d + k] -= diff;
                        } else {
                            gx2[j * d + k] -= diff;
                        }
                    }
                }
            }
        });
        let mut gx1 = vec![0.0; x1.len()];
        let mut gx2 = vec![0.0; x2.len()];
        let (mut gl, mut gv) = (0.0, 0.0);
        for (bi, buf) in parts.chunks(width).enumerate() {
            let dst1 = &mut gx1[bi * lay.s1..bi * lay.s1 + n * d];
            for (o, v) in dst1.iter_mut().zip(&buf[..n * d]) {
                *o += v;
            }
            let dst2 = &mut gx2[bi * lay.s2..bi * lay.s2 + m * d];
            for (o, v) in dst2.iter_mut().zip(&buf[n * d..n * d + m * d]) {
                *o += v;
            }
            gl += buf[width - 2];
            gv += buf[width - 1];
        }
        vec![
            Some(Tensor::new(x1.shape().to_vec(), gx1)),
            Some(Tensor::new(x2.shape().to_vec(), gx2)),
            Some(Tensor::new(inputs[2].shape().to_vec(), vec![gl])),
            Some(Tensor::new(inputs[3].shape().to_vec(), vec![gv])),
        ]
    }
}

/// Prior variance `σ²` broadcast to `shape` (stationary kernel diagonal).
pub fn kernel_diag<'t>(log_variance: Var<'t>, shape: &[usize]) -> Var<'t> {
    log_variance.exp().reshape(vec![1; shape.len()]).broadcast(shape.to_vec())
}
