//! Inference functions producing per-input inducing points and variational
//! parameters.
//!
//! The default form maps an input `x` through `M` affine maps to get the
//! inducing points, `Z_m = W_m x + b_m`, and through two small MLPs to get the
//! means and diagonal covariance factors of `q(u)`. The joint variant emits all
//! three from a single MLP.

use crate::adcore::{softplus_inv, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

/// Negative slope of the hidden activations.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Standard deviation of the initial affine offsets `b_m`.
pub const OFFSET_STD: f64 = 0.5;

/// `M` affine maps `x ↦ W_m x + b_m` on `D`-dimensional inputs.
#[derive(Debug, Clone)]
pub struct AffineBank {
    /// `[M, D, D]`
    pub w: ParamId,
    /// `[M, D]`
    pub b: ParamId,
    pub m: usize,
    pub d: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    /// `[fan_in, fan_out]`
    pub w: ParamId,
    /// `[fan_out]`
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Two-hidden-layer perceptron with leaky-ReLU activations.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    /// Number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.fan_in * l.fan_out + l.fan_out).sum()
    }
}

/// Affine bank plus mean and factor heads.
#[derive(Debug, Clone)]
pub struct Amortizer {
    pub bank: AffineBank,
    pub mean_net: Mlp,
    pub sqrt_net: Mlp,
    pub d_out: usize,
}

/// One MLP emitting `{Z, μ, L}` concatenated.
#[derive(Debug, Clone)]
pub struct JointMlp {
    pub net: Mlp,
    pub m: usize,
    pub d_in: usize,
    pub d_out: usize,
}

/// Per-input variational parameters for a batch of `B` inputs.
#[derive(Debug, Clone, Copy)]
pub struct AmortizedParams<'t> {
    /// `[B, M, D_in]`
    pub z: Var<'t>,
    /// `[B, D_out, M]`
    pub mu: Var<'t>,
    /// `[B, D_out, M]`, strictly positive.
    pub l_diag: Var<'t>,
}

/// `Z[b, m, :] = W_m x_b + b_m` for `x: [B, D]`, `w: [M, D, D]`, `b: [M, D]`.
pub fn affine_map<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Var<'t> {
    let ws = w.shape();
    let (m, d) = (ws[0], ws[1]);
    let batch = x.shape()[0];
    x.matmul(w.reshape(vec![m * d, d]).transpose()).reshape(vec![batch, m, d]).add(b.broadcast(vec![batch, m, d]))
}

/// `affine → leaky_relu → … → affine` over `x: [B, D_in]`.
pub fn mlp_forward<'t>(x: Var<'t>, net: &Mlp, vars: &[Var<'t>]) -> Var<'t> {
    let batch = x.shape()[0];
    let mut h = x;
    for (i, layer) in net.layers.iter().enumerate() {
        let b = vars[layer.b.0].broadcast(vec![batch, layer.fan_out]);
        h = h.matmul(vars[layer.w.0]).add(b);
        if i + 1 < net.layers.len() {
            h = h.leaky_relu(LEAKY_SLOPE);
        }
    }
    h
}

/// Evaluates the inference function of one layer on `inputs: [B, D_in]`.
pub fn amortize_layer<'t>(inputs: Var<'t>, amortizer: &Amortizer, vars: &[Var<'t>]) -> AmortizedParams<'t> {
    let batch = inputs.shape()[0];
    let (m, d_out) = (amortizer.bank.m, amortizer.d_out);
    let z = affine_map(inputs, vars[amortizer.bank.w.0], vars[amortizer.bank.b.0]);
    let mu = mlp_forward(inputs, &amortizer.mean_net, vars).reshape(vec![batch, d_out, m]);
    let l_diag = mlp_forward(inputs, &amortizer.sqrt_net, vars).reshape(vec![batch, d_out, m]).softplus();
    AmortizedParams { z, mu, l_diag }
}

/// Joint-MLP counterpart of [`amortize_layer`].
pub fn amortize_joint<'t>(inputs: Var<'t>, joint: &JointMlp, vars: &[Var<'t>]) -> AmortizedParams<'t> {
    let batch = inputs.shape()[0];
    let (m, di, dout) = (joint.m, joint.d_in, joint.d_out);
    let out = mlp_forward(inputs, &joint.net, vars);
    let z = out.slice(1, 0, m * di).reshape(vec![batch, m, di]);
    let mu = out.slice(1, m * di, m * (di + dout)).reshape(vec![batch, dout, m]);
    let l_diag = out.slice(1, m * (di + dout), m * (di + 2 * dout)).reshape(vec![batch, dout, m]).softplus();
    AmortizedParams { z, mu, l_diag }
}

fn uniform_fan_in(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.uniform_tensor(vec![fan_in, fan_out], -bound, bound)
}

/// Builds a two-hidden-layer MLP of width `min(d_in, d_out)`.
///
/// Hidden layers get fan-in scaled uniform weights and zero biases; the output
/// layer gets the supplied weights and biases.
fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut Rng,
    final_w: Tensor,
    final_b: Tensor,
) -> Mlp {
    let hidden = d_in.min(d_out);
    let widths = [d_in, hidden, hidden];
    let mut layers = Vec::with_capacity(3);
    for (i, pair) in widths.windows(2).enumerate() {
        let (fi, fo) = (pair[0], pair[1]);
        let w = store.add(format!("{prefix}.{i}.w"), uniform_fan_in(rng, fi, fo));
        let b = store.add(format!("{prefix}.{i}.b"), Tensor::zeros(vec![fo]));
        layers.push(Dense { w, b, fan_in: fi, fan_out: fo });
    }
    assert_eq!(final_w.shape(), &[hidden, d_out]);
    let w = store.add(format!("{prefix}.2.w"), final_w);
    let b = store.add(format!("{prefix}.2.b"), final_b);
    layers.push(Dense { w, b, fan_in: hidden, fan_out: d_out });
    Mlp { layers }
}

/// Initial affine offsets `b_m ~ N(0, OFFSET_STD²)`.
fn init_offsets(rng: &mut Rng, m: usize, d: usize) -> Tensor {
    rng.normal_tensor(vec![m, d]).map(|v| OFFSET_STD * v)
}

/// Identity maps with random offsets, zero-weight heads whose biases give
/// `μ = 0` and `L = I` for every input.
pub fn init_amortizer(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    m: usize,
    rng: &mut Rng,
) -> Amortizer {
    let eye = Tensor::eye(d_in);
    let w = Tensor::new(vec![m, d_in, d_in], (0..m).flat_map(|_| eye.data().to_vec()).collect());
    let w = store.add(format!("{prefix}.affine.w"), w);
    let b = store.add(format!("{prefix}.affine.b"), init_offsets(rng, m, d_in));
    let out = m * d_out;
    let hidden = d_in.min(out);
    let mean_net = init_mlp(
        store,
        &format!("{prefix}.mean"),
        d_in,
        out,
        rng,
        Tensor::zeros(vec![hidden, out]),
        Tensor::zeros(vec![out]),
    );
    let sqrt_net = init_mlp(
        store,
        &format!("{prefix}.sqrt"),
        d_in,
        out,
        rng,
        Tensor::zeros(vec![hidden, out]),
        Tensor::full(vec![out], softplus_inv(1.0)),
    );
    Amortizer { bank: AffineBank { w, b, m, d: d_in }, mean_net, sqrt_net, d_out }
}

/// Joint MLP whose inducing-point block starts from random weights and offsets
/// and whose `μ`/`L` blocks start at `0`/`I`.
pub fn init_joint(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    m: usize,
    rng: &mut Rng,
) -> JointMlp {
    let zlen = m * d_in;
    let out = zlen + 2 * m * d_out;
    let hidden = d_in.min(out);
    let zw = uniform_fan_in(rng, hidden, zlen);
    let mut w = Tensor::zeros(vec![hidden, out]);
    for r in 0..hidden {
        w.data_mut()[r * out..r * out + zlen].copy_from_slice(&zw.data()[r * zlen..(r + 1) * zlen]);
    }
    let mut b = vec![0.0; out];
    b[..zlen].copy_from_slice(init_offsets(rng, m, d_in).data());
    b[zlen + m * d_out..].fill(softplus_inv(1.0));
    let net = init_mlp(store, &format!("{prefix}.joint"), d_in, out, rng, w, Tensor::vector(b));
    JointMlp { net, m, d_in, d_out }
}
