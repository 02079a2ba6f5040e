//! One sparse-GP layer in amortized or global mode, plus likelihoods.

use std::f64::consts::PI;

use crate::adcore::{softplus_inv, AdError, ParamId, ParamStore, Tensor, Var};
use crate::amortizer::{amortize_joint, amortize_layer, init_amortizer, init_joint, Amortizer, JointMlp};
use crate::error::{Error, Result};
use crate::gpmath::{self, conditional, gauss_kl, kernel_diag, matern52, MeanFn, QSqrt, HALF_LN_2PI};
use crate::rng::Rng;

/// Added to marginal variances before taking square roots.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub enum LayerMean {
    Zero,
    /// `W: [D_in, D_out]`
    Linear(ParamId),
}

#[derive(Debug, Clone, Copy)]
pub enum GlobalSqrt {
    /// Pre-softplus standard deviations `[D_out, M]`.
    Diag(ParamId),
    /// Strict lower triangle `[D_out, M, M]` plus pre-softplus diagonal `[D_out, M]`.
    Full { strict: ParamId, diag: ParamId },
}

/// Shared inducing points and `q(u)` of a non-amortized layer.
#[derive(Debug, Clone, Copy)]
pub struct GlobalParams {
    /// `[M, D_in]`
    pub z: ParamId,
    /// `[D_out, M]`
    pub q_mu: ParamId,
    pub q_sqrt: GlobalSqrt,
}

#[derive(Debug, Clone)]
pub enum LayerMode {
    Amortized(Amortizer),
    Joint(JointMlp),
    Global(GlobalParams),
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub d_in: usize,
    pub d_out: usize,
    pub m: usize,
    pub log_lengthscale: ParamId,
    pub log_variance: ParamId,
    pub mean: LayerMean,
    pub mode: LayerMode,
}

/// How a new layer's parameters are initialized.
#[derive(Debug, Clone)]
pub enum LayerInit {
    Amortized,
    Joint,
    /// Global mode with inducing points at the given `[M, D_in]` locations.
    Global {
        z: Tensor,
        full_covariance: bool,
    },
}

/// Identity-padded `[d_in, d_out]` matrix.
pub fn padded_identity(d_in: usize, d_out: usize) -> Tensor {
    Tensor::from_fn(vec![d_in, d_out], |k| if k / d_out == k % d_out { 1.0 } else { 0.0 })
}

impl LayerParams {
    /// Registers a layer's parameters under `layer{index}.*`.
    pub fn init(
        store: &mut ParamStore,
        index: usize,
        d_in: usize,
        d_out: usize,
        m: usize,
        linear_mean: bool,
        init: LayerInit,
        rng: &mut Rng,
    ) -> Self {
        let p = format!("layer{index}");
        let log_lengthscale = store.add(format!("{p}.kernel.log_lengthscale"), Tensor::scalar(0.0));
        let log_variance = store.add(format!("{p}.kernel.log_variance"), Tensor::scalar(0.0));
        let mean = if linear_mean {
            LayerMean::Linear(store.add(format!("{p}.mean.w"), padded_identity(d_in, d_out)))
        } else {
            LayerMean::Zero
        };
        let mode = match init {
            LayerInit::Amortized => LayerMode::Amortized(init_amortizer(store, &p, d_in, d_out, m, rng)),
            LayerInit::Joint => LayerMode::Joint(init_joint(store, &p, d_in, d_out, m, rng)),
            LayerInit::Global { z, full_covariance } => {
                assert_eq!(z.shape(), &[m, d_in], "initial inducing points have the wrong shape");
                let z = store.add(format!("{p}.z"), z);
                let q_mu = store.add(format!("{p}.q_mu"), Tensor::zeros(vec![d_out, m]));
                let diag = Tensor::full(vec![d_out, m], softplus_inv(1.0));
                let q_sqrt = if full_covariance {
                    GlobalSqrt::Full {
                        strict: store.add(format!("{p}.q_sqrt.strict"), Tensor::zeros(vec![d_out, m, m])),
                        diag: store.add(format!("{p}.q_sqrt.diag"), diag),
                    }
                } else {
                    GlobalSqrt::Diag(store.add(format!("{p}.q_sqrt"), diag))
                };
                LayerMode::Global(GlobalParams { z, q_mu, q_sqrt })
            }
        };
        LayerParams { d_in, d_out, m, log_lengthscale, log_variance, mean, mode }
    }

    pub fn is_global(&self) -> bool {
        matches!(self.mode, LayerMode::Global(_))
    }

    /// Parameter counts of the mean and factor networks (`|φ|`, `|ψ|`).
    pub fn amortizer_param_counts(&self) -> (usize, usize) {
        match &self.mode {
            LayerMode::Amortized(a) => (a.mean_net.param_count(), a.sqrt_net.param_count()),
            LayerMode::Joint(j) => (j.net.param_count(), 0),
            LayerMode::Global(_) => (0, 0),
        }
    }

    fn mean_fn<'t>(&self, vars: &[Var<'t>]) -> MeanFn<'t> {
        match self.mean {
            LayerMean::Zero => MeanFn::Zero,
            LayerMean::Linear(w) => MeanFn::Linear(vars[w.0]),
        }
    }
}

/// Marginals of one layer over `[B, S, D_out]` and its KL contribution.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
    /// `[B]` per-datapoint KL in amortized mode, a scalar in global mode.
    pub kl: Var<'t>,
    /// Inducing points used: `[B, M, D_in]` or `[M, D_in]`.
    pub z: Var<'t>,
}

fn decomposition(layer: usize, per_datapoint: bool) -> impl Fn(AdError) -> Error {
    move |e| match e {
        AdError::NotPositiveDefinite { batch, pivot } => {
            Error::Decomposition { layer, datapoint: per_datapoint.then_some(batch), pivot }
        }
        other => Error::Ad(other),
    }
}

/// Evaluates layer `index` on `paths: [B, S, D_in]`.
///
/// `amortizer_inputs: [B, D_in]` feeds the inference function in amortized
/// modes and is ignored in global mode.
pub fn layer_forward<'t>(
    paths: Var<'t>,
    amortizer_inputs: Var<'t>,
    layer: &LayerParams,
    vars: &[Var<'t>],
    index: usize,
) -> Result<LayerOutput<'t>> {
    let shape = paths.shape();
    let (b, s, d_in) = (shape[0], shape[1], shape[2]);
    assert_eq!(d_in, layer.d_in, "layer {index}: expected input width {}, got {d_in}", layer.d_in);
    let d_out = layer.d_out;
    let log_ell = vars[layer.log_lengthscale.0];
    let log_var = vars[layer.log_variance.0];
    let mean_fn = layer.mean_fn(vars);

    let amortized = match &layer.mode {
        LayerMode::Amortized(a) => Some(amortize_layer(amortizer_inputs, a, vars)),
        LayerMode::Joint(j) => Some(amortize_joint(amortizer_inputs, j, vars)),
        LayerMode::Global(_) => None,
    };
    match (amortized, &layer.mode) {
        (Some(p), _) => {
            let kuu = matern52(p.z, p.z, log_ell, log_var);
            let kfu = matern52(paths, p.z, log_ell, log_var);
            let kff = kernel_diag(log_var, &[b, s]);
            let mean_f = mean_fn.eval(paths);
            let mean_u = mean_fn.eval(p.z).map(Var::transpose);
            let q_sqrt = QSqrt::Diag(p.l_diag);
            let c = conditional(mean_f, kff, kfu, kuu, p.mu, q_sqrt, mean_u).map_err(decomposition(index, true))?;
            let kl = gauss_kl(p.mu, q_sqrt, mean_u, c.luu);
            Ok(LayerOutput { mean: c.marginal.mean, var: c.marginal.var, kl, z: p.z })
        }
        (None, LayerMode::Global(g)) => {
            let flat = paths.reshape(vec![b * s, d_in]);
            let z = vars[g.z.0];
            let q_mu = vars[g.q_mu.0];
            let q_sqrt = match g.q_sqrt {
                GlobalSqrt::Diag(id) => QSqrt::Diag(vars[id.0].softplus()),
                GlobalSqrt::Full { strict, diag } => {
                    let m = layer.m;
                    let mask = strict_lower_mask(m);
                    let tape = paths.tape();
                    let lower = vars[strict.0].mul(tape.constant(mask).broadcast(vec![d_out, m, m]));
                    QSqrt::Full(lower.add(vars[diag.0].softplus().diag_embed()))
                }
            };
            let kuu = matern52(z, z, log_ell, log_var);
            let kfu = matern52(flat, z, log_ell, log_var);
            let kff = kernel_diag(log_var, &[b * s]);
            let mean_f = mean_fn.eval(flat);
            let mean_u = mean_fn.eval(z).map(Var::transpose);
            let c = conditional(mean_f, kff, kfu, kuu, q_mu, q_sqrt, mean_u).map_err(decomposition(index, false))?;
            let kl = gauss_kl(q_mu, q_sqrt, mean_u, c.luu);
            Ok(LayerOutput {
                mean: c.marginal.mean.reshape(vec![b, s, d_out]),
                var: c.marginal.var.reshape(vec![b, s, d_out]),
                kl,
                z,
            })
        }
        (None, _) => unreachable!(),
    }
}

fn strict_lower_mask(m: usize) -> Tensor {
    Tensor::from_fn(vec![m, m], |k| if k % m < k / m { 1.0 } else { 0.0 })
}

/// Observation model bound to the current tape.
#[derive(Debug, Clone, Copy)]
pub enum Likelihood<'t> {
    Gaussian { log_sigma: Var<'t> },
    BernoulliProbit { points: usize },
}

/// `E_{N(f|m,v)}[ln p(y|f)]` elementwise over `[B, S]`; `y` is `[B]`.
pub fn expected_log_lik<'t>(y: &Tensor, mean: Var<'t>, var: Var<'t>, lik: Likelihood<'t>) -> Var<'t> {
    let shape = mean.shape();
    let (b, s) = (shape[0], shape[1]);
    let tape = mean.tape();
    let yv = tape.constant(y.clone().reshape(vec![b, 1])).broadcast(vec![b, s]);
    match lik {
        Likelihood::Gaussian { log_sigma } => {
            let inv_two_s2 = log_sigma.scale(-2.0).exp().scale(0.5);
            let resid = yv.sub(mean).square().add(var);
            resid.mul(inv_two_s2).add(log_sigma).shift(HALF_LN_2PI).neg()
        }
        Likelihood::BernoulliProbit { points } => {
            let (t, w) = gpmath::gauss_hermite(points);
            let sign = tape.constant(y.map(|v| 2.0 * v - 1.0).reshape(vec![b, 1, 1])).broadcast(vec![b, s, points]);
            let nodes = tape.constant(Tensor::new(vec![1, 1, points], t)).broadcast(vec![b, s, points]);
            let weights = Tensor::new(vec![1, 1, points], w.iter().map(|w| w / PI.sqrt()).collect());
            let weights = tape.constant(weights).broadcast(vec![b, s, points]);
            let m = mean.reshape(vec![b, s, 1]).broadcast(vec![b, s, points]);
            let sd = var.shift(STD_FLOOR).scale(2.0).sqrt().reshape(vec![b, s, 1]).broadcast(vec![b, s, points]);
            let f = m.add(sd.mul(nodes));
            gpmath::log_ndtr(sign.mul(f)).mul(weights).sum_axis(2)
        }
    }
}

/// One-layer ELBO on a minibatch `x: [B, D]`, `y: [B]` from a dataset of
/// `n_total` points.
///
/// The data term is scaled by `N/B`. The KL term is the plain sum in global
/// mode and the per-datapoint average in amortized mode.
pub fn shallow_elbo<'t>(
    x: Var<'t>,
    y: &Tensor,
    layer: &LayerParams,
    vars: &[Var<'t>],
    lik: Likelihood<'t>,
    n_total: usize,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let b = shape[0];
    if y.len() != b {
        return Err(Error::Data(format!("batch has {b} inputs but {} targets", y.len())));
    }
    let paths = x.reshape(vec![b, 1, shape[1]]);
    let out = layer_forward(paths, x, layer, vars, 0)?;
    let ell = expected_log_lik(y, out.mean.reshape(vec![b, 1]), out.var.reshape(vec![b, 1]), lik).sum();
    let data = ell.scale(n_total as f64 / b as f64);
    let kl = if layer.is_global() { out.kl } else { out.kl.sum().scale(1.0 / b as f64) };
    Ok(data.sub(kl))
}
