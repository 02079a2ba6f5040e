//! Deep GP built from [`LayerParams`]: propagation rules, objectives and
//! mixture predictions.

mod cost;

pub use cost::{cost_report, CostReport, LayerCost};

use crate::adcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::config::{InferenceFn, LikelihoodKind, ModelConfig, Rule};
use crate::error::{Error, Result};
use crate::gpmath::{self, HALF_LN_2PI};
use crate::layers::{
    expected_log_lik, layer_forward, padded_identity, LayerInit, LayerOutput, LayerParams, Likelihood, STD_FLOOR,
};
use crate::rng::Rng;

/// Architecture and initialization settings of a [`DgpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub rule: Rule,
    /// Widths `D⁰ … D^L`.
    pub dims: Vec<usize>,
    pub inducing: Vec<usize>,
    pub samples: usize,
    pub likelihood: LikelihoodKind,
    pub inference_fn: InferenceFn,
    pub full_covariance: bool,
    pub beta_reg: f64,
    pub init_noise_var: f64,
    pub hermite_points: usize,
}

impl ModelSpec {
    pub fn from_config(cfg: &ModelConfig, input_dim: usize) -> Self {
        ModelSpec {
            rule: cfg.rule,
            dims: cfg.layer_dims(input_dim),
            inducing: cfg.inducing.clone(),
            samples: cfg.samples,
            likelihood: cfg.likelihood,
            inference_fn: cfg.inference_fn,
            full_covariance: cfg.full_covariance,
            beta_reg: cfg.beta_reg,
            init_noise_var: cfg.init_noise_var,
            hermite_points: cfg.hermite_points,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DgpModel {
    pub spec: ModelSpec,
    pub layers: Vec<LayerParams>,
    /// Quadrature abscissas `[S, D^l]` for every inner layer (quadrature rules).
    pub xi: Vec<ParamId>,
    /// Logits of the quadrature weights `[S]` (quadrature rules).
    pub omega_logits: Option<ParamId>,
    /// Log observation standard deviation (Gaussian likelihood).
    pub log_sigma: Option<ParamId>,
    pub params: ParamStore,
}

/// Source of the standard-normal variates used by the sampling rules.
pub enum Noise<'a> {
    /// Fresh draws per datapoint, path and dimension.
    Sample(&'a mut Rng),
    /// One `[S, D^l]` tensor per inner layer, shared across datapoints.
    Fixed(&'a [Tensor]),
}

/// Result of propagating a batch through every layer.
pub struct ForwardPass<'t> {
    /// Per-layer marginals `[B, S_l, D^l]`; the first layer has one path.
    pub layers: Vec<LayerOutput<'t>>,
    /// Inputs given to each layer's inference function (empty for baselines).
    pub amortizer_inputs: Vec<Var<'t>>,
    /// Per-layer KL: `[B]` for amortized rules (averaged over paths under
    /// AR1), scalar for the baselines.
    pub kl_per_layer: Vec<Var<'t>>,
    /// Normalized quadrature weights `[S]` (quadrature rules only).
    pub weights: Option<Var<'t>>,
}

impl<'t> ForwardPass<'t> {
    pub fn output(&self) -> &LayerOutput<'t> {
        self.layers.last().unwrap()
    }

    /// KL term of the objective: the per-datapoint KL summed over layers and
    /// averaged over the batch for amortized rules, the plain sum for the
    /// baselines.
    pub fn kl_term(&self, amortized: bool) -> Var<'t> {
        let mut total = self.kl_per_layer[0];
        for k in &self.kl_per_layer[1..] {
            total = total.add(*k);
        }
        if amortized {
            let b = total.shape()[0];
            total.sum().scale(1.0 / b as f64)
        } else {
            total
        }
    }
}

/// Finite Gaussian mixture over latent outputs, `[B, S]` per component.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePredictive {
    pub means: Tensor,
    pub vars: Tensor,
    pub weights: Vec<f64>,
    /// Observation noise variance for Gaussian likelihoods.
    pub noise_var: Option<f64>,
}

impl MixturePredictive {
    pub fn len(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Mixture mean per point.
    pub fn mean(&self) -> Vec<f64> {
        let s = self.components();
        self.means.data().chunks(s).map(|c| c.iter().zip(&self.weights).map(|(m, w)| m * w).sum()).collect()
    }

    /// `(weights, means, variances)` of point `i`, noise included.
    pub fn point(&self, i: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let s = self.components();
        let noise = self.noise_var.unwrap_or(0.0);
        let m = self.means.data()[i * s..(i + 1) * s].to_vec();
        let v = self.vars.data()[i * s..(i + 1) * s].iter().map(|v| v + noise).collect();
        (self.weights.clone(), m, v)
    }

    /// `P(y = 1)` per point under the probit link, each component
    /// integrated by Gauss–Hermite quadrature.
    pub fn class_probabilities(&self, points: usize) -> Vec<f64> {
        let s = self.components();
        (0..self.len())
            .map(|i| {
                (0..s)
                    .map(|k| {
                        let (m, v) = (self.means.data()[i * s + k], self.vars.data()[i * s + k]);
                        self.weights[k] * gpmath::gauss_hermite_expect(gpmath::probit_value, m, v, points)
                    })
                    .sum::<f64>()
                    .clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// Rows of `x` chosen without replacement (with small jittered repeats once
/// the data run out).
fn subset_rows(x: &Tensor, m: usize, rng: &mut Rng) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let perm = rng.permutation(n);
    let mut out = Vec::with_capacity(m * d);
    for k in 0..m {
        let row = perm[k % n];
        for j in 0..d {
            let base = x.data()[row * d + j];
            out.push(if k < n { base } else { base + 1e-3 * rng.normal() });
        }
    }
    Tensor::matrix(m, d, out)
}

impl DgpModel {
    /// Builds and initializes a model. `train_x: [N, D⁰]` seeds the global
    /// inducing points of the baselines.
    pub fn new(spec: ModelSpec, train_x: &Tensor, rng: &mut Rng) -> Result<Self> {
        let n_layers = spec.inducing.len();
        if spec.dims.len() != n_layers + 1 {
            return Err(Error::Config("dims must list D⁰ … D^L".into()));
        }
        if spec.samples == 0 {
            return Err(Error::Config("at least one path is required".into()));
        }
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(n_layers);
        let global = spec.inference_fn == InferenceFn::Global;
        let mut propagated = train_x.clone();
        for l in 0..n_layers {
            let (d_in, d_out, m) = (spec.dims[l], spec.dims[l + 1], spec.inducing[l]);
            let linear_mean = global && l + 1 < n_layers;
            let init = match spec.inference_fn {
                InferenceFn::AffineMlp => LayerInit::Amortized,
                InferenceFn::JointMlp => LayerInit::Joint,
                InferenceFn::Global => {
                    LayerInit::Global { z: subset_rows(&propagated, m, rng), full_covariance: spec.full_covariance }
                }
            };
            if global {
                propagated = crate::adcore::linalg::matmul(&propagated, &padded_identity(d_in, d_out), false, false);
            }
            layers.push(LayerParams::init(&mut params, l, d_in, d_out, m, linear_mean, init, rng));
        }
        let mut xi = Vec::new();
        let mut omega_logits = None;
        if spec.rule.uses_quadrature() {
            for l in 1..n_layers {
                let t = rng.normal_tensor(vec![spec.samples, spec.dims[l]]);
                xi.push(params.add(format!("xi{l}"), t));
            }
            omega_logits = Some(params.add("omega_logits", Tensor::zeros(vec![spec.samples])));
        }
        let log_sigma = (spec.likelihood == LikelihoodKind::Gaussian)
            .then(|| params.add("likelihood.log_sigma", Tensor::scalar(0.5 * spec.init_noise_var.ln())));
        Ok(DgpModel { spec, layers, xi, omega_logits, log_sigma, params })
    }

    pub fn from_config(cfg: &ModelConfig, train_x: &Tensor) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed, crate::rng::stream::INIT);
        Self::new(ModelSpec::from_config(cfg, train_x.shape()[1]), train_x, &mut rng)
    }

    pub fn rule(&self) -> Rule {
        self.spec.rule
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn likelihood<'t>(&self, vars: &[Var<'t>]) -> Likelihood<'t> {
        match self.log_sigma {
            Some(id) => Likelihood::Gaussian { log_sigma: vars[id.0] },
            None => Likelihood::BernoulliProbit { points: self.spec.hermite_points },
        }
    }

    /// Paths used when evaluating: the quadrature count for quadrature rules,
    /// `requested` otherwise.
    pub fn eval_paths(&self, requested: usize) -> usize {
        if self.rule().uses_quadrature() {
            self.spec.samples
        } else {
            requested
        }
    }

    /// Propagates `x: [B, D⁰]` through every layer with `s` paths.
    pub fn forward<'t>(&self, vars: &[Var<'t>], x: Var<'t>, s: usize, noise: Noise<'_>) -> Result<ForwardPass<'t>> {
        match self.rule() {
            Rule::AR1 => self.forward_ar1(vars, x, s, noise),
            Rule::AR2 | Rule::DS => self.forward_ar2(vars, x, s, noise),
            Rule::AR2P | Rule::AR2PP | Rule::DSPP => self.forward_ar2p(vars, x),
        }
    }

    /// Every path feeds its own inference-function call on layers ≥ 2.
    pub fn forward_ar1<'t>(&self, vars: &[Var<'t>], x: Var<'t>, s: usize, noise: Noise<'_>) -> Result<ForwardPass<'t>> {
        assert_eq!(self.rule(), Rule::AR1);
        self.propagate(vars, x, s, noise)
    }

    /// Inference functions see the path-averaged predecessor means; `DS`
    /// shares this sampling scheme.
    pub fn forward_ar2<'t>(&self, vars: &[Var<'t>], x: Var<'t>, s: usize, noise: Noise<'_>) -> Result<ForwardPass<'t>> {
        assert!(matches!(self.rule(), Rule::AR2 | Rule::DS));
        self.propagate(vars, x, s, noise)
    }

    /// Deterministic quadrature paths `m + ξ √K` with weighted-mean
    /// inference-function inputs.
    pub fn forward_ar2p<'t>(&self, vars: &[Var<'t>], x: Var<'t>) -> Result<ForwardPass<'t>> {
        assert!(self.rule().uses_quadrature());
        self.propagate(vars, x, self.spec.samples, Noise::Fixed(&[]))
    }

    fn propagate<'t>(&self, vars: &[Var<'t>], x: Var<'t>, s: usize, mut noise: Noise<'_>) -> Result<ForwardPass<'t>> {
        assert!(s >= 1, "at least one path is required");
        let rule = self.rule();
        let tape = x.tape();
        let shape = x.shape();
        let (b, d0) = (shape[0], shape[1]);
        assert_eq!(d0, self.spec.dims[0], "input width mismatch");
        let weights = self.omega_logits.map(|id| vars[id.0].softmax());

        let mut outputs: Vec<LayerOutput<'t>> = Vec::with_capacity(self.layers.len());
        let mut amortizer_inputs = Vec::new();
        let mut kl_per_layer = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            if l == 0 {
                let out = layer_forward(x.reshape(vec![b, 1, d0]), x, layer, vars, 0)?;
                if rule.is_amortized() {
                    amortizer_inputs.push(x);
                }
                kl_per_layer.push(out.kl);
                outputs.push(out);
                continue;
            }
            let prev = outputs[l - 1];
            let d = layer.d_in;
            let s_prev = prev.mean.shape()[1];
            let full = vec![b, s, d];
            let eps = if rule.uses_quadrature() {
                vars[self.xi[l - 1].0].broadcast(full.clone())
            } else {
                match &mut noise {
                    Noise::Sample(rng) => tape.constant(rng.normal_tensor(full.clone())),
                    Noise::Fixed(t) => {
                        let e = &t[l - 1];
                        assert_eq!(e.shape(), &[s, d], "fixed noise for layer {l} has the wrong shape");
                        tape.constant(e.clone()).broadcast(full.clone())
                    }
                }
            };
            let std = prev.var.shift(STD_FLOOR).sqrt().broadcast(full.clone());
            let paths = prev.mean.broadcast(full.clone()).add(eps.mul(std));

            let out = match rule {
                Rule::AR1 => {
                    let flat = paths.reshape(vec![b * s, d]);
                    let o =
                        layer_forward(flat.reshape(vec![b * s, 1, d]), flat, layer, vars, l).map_err(|e| match e {
                            Error::Decomposition { layer, datapoint, pivot } => {
                                Error::Decomposition { layer, datapoint: datapoint.map(|i| i / s), pivot }
                            }
                            other => other,
                        })?;
                    amortizer_inputs.push(flat);
                    let d_out = layer.d_out;
                    LayerOutput {
                        mean: o.mean.reshape(vec![b, s, d_out]),
                        var: o.var.reshape(vec![b, s, d_out]),
                        kl: o.kl.reshape(vec![b, s]).mean_axis(1),
                        z: o.z,
                    }
                }
                Rule::AR2 | Rule::AR2P | Rule::AR2PP => {
                    let a = if s_prev == 1 {
                        prev.mean.reshape(vec![b, d])
                    } else if rule == Rule::AR2 {
                        prev.mean.mean_axis(1)
                    } else {
                        let w = weights.unwrap().reshape(vec![1, s_prev, 1]).broadcast(vec![b, s_prev, d]);
                        prev.mean.mul(w).sum_axis(1)
                    };
                    amortizer_inputs.push(a);
                    layer_forward(paths, a, layer, vars, l)?
                }
                Rule::DS | Rule::DSPP => layer_forward(paths, x, layer, vars, l)?,
            };
            kl_per_layer.push(out.kl);
            outputs.push(out);
        }
        Ok(ForwardPass { layers: outputs, amortizer_inputs, kl_per_layer, weights })
    }

    /// Log mixture weights over the final paths, `[S_L]`.
    fn log_path_weights<'t>(&self, pass: &ForwardPass<'t>, tape: &'t Tape) -> Var<'t> {
        let s = pass.output().mean.shape()[1];
        match pass.weights {
            Some(w) if s > 1 => w.log(),
            _ => tape.constant(Tensor::full(vec![s], -(s as f64).ln())),
        }
    }

    /// Negated ELBO on a minibatch `x: [B, D⁰]`, `y: [B]` drawn from `n_total`
    /// points.
    pub fn elbo<'t>(
        &self,
        vars: &[Var<'t>],
        x: Var<'t>,
        y: &Tensor,
        n_total: usize,
        s: usize,
        noise: Noise<'_>,
    ) -> Result<Var<'t>> {
        let pass = self.forward(vars, x, s, noise)?;
        let out = pass.output();
        let shape = out.mean.shape();
        let (b, sl) = (shape[0], shape[1]);
        if y.len() != b {
            return Err(Error::Data(format!("batch has {b} inputs but {} targets", y.len())));
        }
        let ell =
            expected_log_lik(y, out.mean.reshape(vec![b, sl]), out.var.reshape(vec![b, sl]), self.likelihood(vars));
        let per_point = match pass.weights {
            Some(w) if sl > 1 => ell.mul(w.reshape(vec![1, sl]).broadcast(vec![b, sl])).sum_axis(1),
            _ => ell.mean_axis(1),
        };
        let data = per_point.sum().scale(n_total as f64 / b as f64);
        Ok(pass.kl_term(self.rule().is_amortized()).sub(data))
    }

    /// Negated predictive objective: the log mixture density of the targets
    /// minus `β` times the KL term.
    pub fn pp_objective<'t>(
        &self,
        vars: &[Var<'t>],
        x: Var<'t>,
        y: &Tensor,
        n_total: usize,
        s: usize,
        noise: Noise<'_>,
    ) -> Result<Var<'t>> {
        let Some(ls) = self.log_sigma else {
            return Err(Error::Config("the predictive objective needs a gaussian likelihood".into()));
        };
        let tape = x.tape();
        let pass = self.forward(vars, x, s, noise)?;
        let out = pass.output();
        let shape = out.mean.shape();
        let (b, sl) = (shape[0], shape[1]);
        if y.len() != b {
            return Err(Error::Data(format!("batch has {b} inputs but {} targets", y.len())));
        }
        let total_var = out.var.reshape(vec![b, sl]).add(vars[ls.0].scale(2.0).exp().broadcast(vec![b, sl]));
        let yv = tape.constant(y.clone().reshape(vec![b, 1])).broadcast(vec![b, sl]);
        let resid = yv.sub(out.mean.reshape(vec![b, sl])).square().div(total_var).scale(0.5);
        let log_n = resid.add(total_var.log().scale(0.5)).shift(HALF_LN_2PI).neg();
        let log_w = self.log_path_weights(&pass, tape).reshape(vec![1, sl]).broadcast(vec![b, sl]);
        let lse = log_n.add(log_w).logsumexp_last();
        let data = lse.sum().scale(n_total as f64 / b as f64);
        let kl = pass.kl_term(self.rule().is_amortized()).scale(self.spec.beta_reg);
        Ok(kl.sub(data))
    }

    /// Training loss for this model's rule.
    pub fn loss<'t>(
        &self,
        vars: &[Var<'t>],
        x: Var<'t>,
        y: &Tensor,
        n_total: usize,
        s: usize,
        noise: Noise<'_>,
    ) -> Result<Var<'t>> {
        if self.rule().predictive_objective() {
            self.pp_objective(vars, x, y, n_total, s, noise)
        } else {
            self.elbo(vars, x, y, n_total, s, noise)
        }
    }

    /// Mixture predictive at `x: [B, D⁰]` with `s` components (quadrature
    /// rules always use their own count). `rng` drives the sampling rules.
    pub fn predict(&self, x: &Tensor, s: usize, rng: &mut Rng) -> Result<MixturePredictive> {
        const CHUNK: usize = 512;
        let n = x.shape()[0];
        let d = x.shape()[1];
        let s = self.eval_paths(s);
        let mut means = Vec::with_capacity(n * s);
        let mut var = Vec::with_capacity(n * s);
        let mut weights = vec![1.0 / s as f64; s];
        let mut components = s;
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let tape = Tape::new();
            let vars = self.params.bind(&tape);
            let xb = tape.constant(Tensor::matrix(end - start, d, x.data()[start * d..end * d].to_vec()));
            let pass = self.forward(&vars, xb, s, Noise::Sample(rng))?;
            let out = pass.output();
            components = out.mean.shape()[1];
            means.extend_from_slice(out.mean.value().data());
            var.extend(out.var.value().data().iter().map(|v| v.max(0.0)));
            if components == 1 {
                weights = vec![1.0];
            } else if let Some(w) = pass.weights {
                weights = w.value().data().to_vec();
            }
        }
        if components == 1 {
            weights = vec![1.0];
        }
        let noise_var = self.log_sigma.map(|id| (2.0 * self.params.get(id).item()).exp());
        Ok(MixturePredictive {
            means: Tensor::matrix(n, components, means),
            vars: Tensor::matrix(n, components, var),
            weights,
            noise_var,
        })
    }
}

#[cfg(test)]
mod tests;
