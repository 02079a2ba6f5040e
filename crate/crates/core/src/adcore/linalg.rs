//! Batched dense kernels over `[..., rows, cols]` tensors.
//!
//! Two operands either share identical leading batch dimensions or one of
//! them is a plain matrix reused for every batch entry.

use super::tensor::Tensor;
use crate::par;

/// Resolved leading-batch layout of a binary matrix operation.
pub(crate) struct BatchPair {
    pub dims: Vec<usize>,
    pub count: usize,
    pub a_batched: bool,
    pub b_batched: bool,
}

pub(crate) fn batch_pair(op: &str, a: &[usize], b: &[usize]) -> BatchPair {
    assert!(a.len() >= 2 && b.len() >= 2, "{op}: operands must be matrices, got {a:?} and {b:?}");
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let (dims, a_batched, b_batched) = if ab == bb {
        (ab.to_vec(), !ab.is_empty(), !bb.is_empty())
    } else if ab.is_empty() {
        (bb.to_vec(), false, true)
    } else if bb.is_empty() {
        (ab.to_vec(), true, false)
    } else {
        panic!("{op}: incompatible batch dimensions {a:?} vs {b:?}");
    };
    let count = dims.iter().product();
    BatchPair { dims, count, a_batched, b_batched }
}

fn with_matrix_dims(batch: &[usize], r: usize, c: usize) -> Vec<usize> {
    let mut s = batch.to_vec();
    s.push(r);
    s.push(c);
    s
}

/// `op(a) @ op(b)` where `op` optionally transposes the trailing matrix.
pub fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Tensor {
    let bp = batch_pair("matmul", a.shape(), b.shape());
    let (ar, ac) = a.rows_cols();
    let (br, bc) = b.rows_cols();
    let (n, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, m) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul: inner dimensions differ ({:?} x {:?})", a.shape(), b.shape());
    let mut out = vec![0.0; bp.count * n * m];
    let (ad, bd) = (a.data(), b.data());
    let a_stride = if bp.a_batched { ar * ac } else { 0 };
    let b_stride = if bp.b_batched { br * bc } else { 0 };
    // (row stride, col stride) of op(a) and op(b)
    let (a_rs, a_cs) = if trans_a { (1, ac) } else { (ac, 1) };
    let (b_rs, b_cs) = if trans_b { (1, bc) } else { (bc, 1) };
    par::for_each_chunk_mut(&mut out, n * m, n * m * k, |bi, c| {
        let a0 = &ad[bi * a_stride..];
        let b0 = &bd[bi * b_stride..];
        for i in 0..n {
            let crow = &mut c[i * m..(i + 1) * m];
            for p in 0..k {
                let av = a0[i * a_rs + p * a_cs];
                if av == 0.0 {
                    continue;
                }
                let boff = p * b_rs;
                if b_cs == 1 {
                    let brow = &b0[boff..boff + m];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                } else {
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += av * b0[boff + j * b_cs];
                    }
                }
            }
        }
    });
    Tensor::new(with_matrix_dims(&bp.dims, n, m), out)
}

/// Swaps the trailing two axes.
pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = a.rows_cols();
    let count = a.batch_count();
    let src = a.data();
    let mut out = vec![0.0; a.len()];
    for bi in 0..count {
        let s = &src[bi * r * c..(bi + 1) * r * c];
        let d = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
    let batch = &a.shape()[..a.rank() - 2];
    Tensor::new(with_matrix_dims(batch, c, r), out)
}

/// Failure of a Cholesky factorization: batch entry and pivot row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotPositiveDefinite {
    pub batch: usize,
    pub pivot: usize,
}

/// Lower Cholesky factor of the symmetric part `(A + Aᵀ)/2` of every matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor, NotPositiveDefinite> {
    let (n, n2) = a.rows_cols();
    assert_eq!(n, n2, "cholesky: matrix must be square, got {:?}", a.shape());
    let count = a.batch_count();
    let src = a.data();
    let mut out = vec![0.0; a.len()];
    let mut failures = vec![usize::MAX as f64; count];
    par::for_each_chunk_pair_mut(&mut out, n * n, &mut failures, 1, n * n * n / 3 + 1, |bi, l, fail| {
        let s = &src[bi * n * n..(bi + 1) * n * n];
        if let Err(pivot) = cholesky_in(s, l, n) {
            fail[0] = pivot as f64;
        }
    });
    if let Some((batch, &p)) = failures.iter().enumerate().find(|(_, &p)| p != usize::MAX as f64) {
        return Err(NotPositiveDefinite { batch, pivot: p as usize });
    }
    Ok(Tensor::new(a.shape().to_vec(), out))
}

fn cholesky_in(s: &[f64], l: &mut [f64], n: usize) -> Result<(), usize> {
    for j in 0..n {
        let mut d = s[j * n + j];
        for p in 0..j {
            d -= l[j * n + p] * l[j * n + p];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut v = 0.5 * (s[i * n + j] + s[j * n + i]);
            for p in 0..j {
                v -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = v / djj;
        }
    }
    Ok(())
}

/// Which triangle of the coefficient matrix holds the data and whether the
/// system uses that matrix or its transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Triangle {
    Lower,
    Upper,
}

/// Solves `T X = B` (or `Tᵀ X = B` when `transposed`) for triangular `T`.
pub fn tri_solve(t: &Tensor, b: &Tensor, tri: Triangle, transposed: bool) -> Tensor {
    let bp = batch_pair("tri_solve", t.shape(), b.shape());
    assert!(!bp.a_batched || bp.b_batched, "tri_solve: right-hand side must carry the batch dimensions");
    let (n, n2) = t.rows_cols();
    assert_eq!(n, n2, "tri_solve: coefficient matrix must be square");
    let (br, m) = b.rows_cols();
    assert_eq!(br, n, "tri_solve: {:?} incompatible with {:?}", t.shape(), b.shape());
    let td = t.data();
    let t_stride = if bp.a_batched { n * n } else { 0 };
    let mut out = b.data().to_vec();
    // effective system is lower-triangular (forward substitution) when the
    // stored triangle and the transpose flag agree
    let forward = matches!((tri, transposed), (Triangle::Lower, false) | (Triangle::Upper, true));
    par::for_each_chunk_mut(&mut out, n * m, n * n * m, |bi, x| {
        let tm = &td[bi * t_stride..bi * t_stride + n * n];
        // effective coefficient matrix, row-major
        let e: Vec<f64> = if transposed { (0..n * n).map(|k| tm[(k % n) * n + k / n]).collect() } else { tm.to_vec() };
        if forward {
            for i in 0..n {
                let (done, rest) = x.split_at_mut(i * m);
                let xi = &mut rest[..m];
                for (p, xp) in done.chunks_exact(m).enumerate() {
                    let c = e[i * n + p];
                    if c != 0.0 {
                        xi.iter_mut().zip(xp).for_each(|(a, b)| *a -= c * b);
                    }
                }
                let d = e[i * n + i];
                xi.iter_mut().for_each(|v| *v /= d);
            }
        } else {
            for i in (0..n).rev() {
                let (head, done) = x.split_at_mut((i + 1) * m);
                let xi = &mut head[i * m..];
                for (k, xp) in done.chunks_exact(m).enumerate() {
                    let c = e[i * n + i + 1 + k];
                    if c != 0.0 {
                        xi.iter_mut().zip(xp).for_each(|(a, b)| *a -= c * b);
                    }
                }
                let d = e[i * n + i];
                xi.iter_mut().for_each(|v| *v /= d);
            }
        }
    });
    Tensor::new(with_matrix_dims(&bp.dims, n, m), out)
}

/// Writes `L⁻¹` of the lower-triangular `n×n` matrix `l` into `x`.
pub(crate) fn lower_inverse_in(l: &[f64], x: &mut [f64], n: usize) {
    x.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..n {
        x[j * n + j] = 1.0 / l[j * n + j];
        for i in j + 1..n {
            let mut acc = 0.0;
            for k in j..i {
                acc += l[i * n + k] * x[k * n + j];
            }
            x[i * n + j] = -acc / l[i * n + i];
        }
    }
}

/// Adjoint of `A ↦ chol(A)`: `Ā = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)`, where `Φ` keeps
/// the lower triangle and halves the diagonal. Only the lower triangle of
/// `gl` is read.
pub fn cholesky_adjoint(l: &Tensor, gl: &Tensor) -> Tensor {
    let (n, _) = l.rows_cols();
    let (ld, gd) = (l.data(), gl.data());
    let mut out = vec![0.0; l.len()];
    par::for_each_chunk_mut(&mut out, n * n, n * n * n, |bi, ga| {
        let lm = &ld[bi * n * n..(bi + 1) * n * n];
        let g = &gd[bi * n * n..(bi + 1) * n * n];
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut acc = 0.0;
                for k in i..n {
                    acc += lm[k * n + i] * g[k * n + j];
                }
                p[i * n + j] = if i == j { 0.5 * acc } else { acc };
            }
        }
        let mut x = vec![0.0; n * n];
        lower_inverse_in(lm, &mut x, n);
        // R = P X (lower)
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut acc = 0.0;
                for k in j..=i {
                    acc += p[i * n + k] * x[k * n + j];
                }
                r[i * n + j] = acc;
            }
        }
        // Q = Xᵀ R, then symmetrize
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in i.max(j)..n {
                    acc += x[k * n + i] * r[k * n + j];
                }
                ga[i * n + j] = acc;
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let s = 0.5 * (ga[i * n + j] + ga[j * n + i]);
                ga[i * n + j] = s;
                ga[j * n + i] = s;
            }
        }
    });
    Tensor::new(l.shape().to_vec(), out)
}

/// Zeroes the strict upper (`keep = Lower`) or strict lower triangle.
pub fn triangle_mask(a: &mut Tensor, keep: Triangle) {
    let (r, c) = a.rows_cols();
    for m in a.data_mut().chunks_mut(r * c) {
        for i in 0..r {
            for j in 0..c {
                let drop = match keep {
                    Triangle::Lower => j > i,
                    Triangle::Upper => j < i,
                };
                if drop {
                    m[i * c + j] = 0.0;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_of_small_spd() {
        let a = Tensor::matrix(2, 2, vec![4.0, 2.0, 2.0, 3.0]);
        let l = cholesky(&a).unwrap();
        let expect = [2.0, 0.0, 1.0, 2f64.sqrt()];
        for (x, e) in l.data().iter().zip(expect) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn cholesky_reports_pivot() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        let err = cholesky(&a).unwrap_err();
        assert_eq!(err.pivot, 1);
    }

    #[test]
    fn transposed_matmul_matches_explicit() {
        let a = Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect());
        let b = Tensor::new(vec![2, 3, 4], (0..24).map(|v| (v as f64).sin()).collect());
        let direct = matmul(&transpose(&a), &b, false, false);
        let fused = matmul(&a, &b, true, false);
        assert!(direct.max_abs_diff(&fused) < 1e-14);
    }

    #[test]
    fn triangular_solves_invert_products() {
        let l = Tensor::matrix(3, 3, vec![2.0, 0.0, 0.0, 0.5, 1.5, 0.0, -0.3, 0.2, 1.1]);
        let x = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
        let b = matmul(&l, &x, false, false);
        assert!(tri_solve(&l, &b, Triangle::Lower, false).max_abs_diff(&x) < 1e-14);
        let bt = matmul(&l, &x, true, false);
        assert!(tri_solve(&l, &bt, Triangle::Lower, true).max_abs_diff(&x) < 1e-14);
        let u = transpose(&l);
        let bu = matmul(&u, &x, false, false);
        assert!(tri_solve(&u, &bu, Triangle::Upper, false).max_abs_diff(&x) < 1e-14);
    }
}
