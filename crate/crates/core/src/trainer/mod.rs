//! Adam, the minibatch training loop and evaluation.

mod checkpoint;

pub use checkpoint::{Checkpoint, ManifestEntry, MAGIC};

use crate::adcore::{ParamStore, Tape, Tensor};
use crate::config::{ModelConfig, Task};
use crate::data::Dataset;
use crate::deepmodel::{DgpModel, Noise};
use crate::error::{Error, Result};
use crate::metrics::{score_binary, score_regression, ScoreReport};
use crate::rng::{stream, Rng};
use serde::Serialize;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros, lr, beta1: BETA1, beta2: BETA2, eps: EPS }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter");
    for id in params.ids() {
        assert_eq!(grads[id.0].shape(), params.get(id).shape(), "gradient shape for {}", params.name(id));
        if !grads[id.0].all_finite() {
            return Err(Error::NonFiniteGradient { param: params.name(id).to_string() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for id in params.ids() {
        let g = grads[id.0].data();
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let p = params.get_mut(id).data_mut();
        for k in 0..g.len() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            p[k] -= state.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint Euclidean norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    pub val_nll: Option<f64>,
    pub val_rmse: Option<f64>,
    pub val_error_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch with the lowest validation NLL and its parameters.
    pub best: Option<(usize, Vec<Tensor>)>,
}

/// Minibatch loss and parameter gradients.
pub fn loss_and_grads(
    model: &DgpModel,
    x: &Tensor,
    y: &Tensor,
    n_total: usize,
    s: usize,
    noise: Noise<'_>,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let vars = model.params.bind(&tape);
    let loss = model.loss(&vars, tape.constant(x.clone()), y, n_total, s, noise)?;
    let value = loss.item();
    let mut grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|v| grads.take(*v)).collect()))
}

/// Scores `model` on `ds` with `s` components; sampling rules draw from a
/// fresh evaluation stream of `seed`, so repeated calls agree exactly.
pub fn evaluate(model: &DgpModel, ds: &Dataset, s: usize, seed: u64) -> Result<ScoreReport> {
    let mut rng = Rng::new(seed, stream::EVAL);
    let pred = model.predict(&ds.x, s, &mut rng)?;
    Ok(match ds.task {
        Task::Regression => score_regression(&pred, &ds.y),
        Task::Binary => score_binary(&pred, &ds.y, model.spec.hermite_points),
    })
}

fn batch_of(ds: &Dataset, idx: &[usize]) -> (Tensor, Tensor) {
    let d = ds.dim();
    let mut x = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        x.extend_from_slice(ds.row(i));
    }
    (Tensor::matrix(idx.len(), d, x), Tensor::vector(idx.iter().map(|&i| ds.y[i]).collect()))
}

/// Runs `cfg.epochs` passes of shuffled minibatch Adam over `train`,
/// scoring `val` every `cfg.val_every` epochs and after the last one.
pub fn train(
    model: &mut DgpModel,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &ModelConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.rule.predictive_objective() && model.log_sigma.is_none() {
        return Err(Error::Config("the predictive objective needs a gaussian likelihood".into()));
    }
    let mut state = AdamState::new(&model.params, cfg.lr);
    let mut shuffle = Rng::new(cfg.seed, stream::SHUFFLE);
    let mut noise = Rng::new(cfg.seed, stream::NOISE);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    for epoch in 1..=cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch) {
            let (x, y) = batch_of(train, idx);
            let (loss, mut grads) = loss_and_grads(model, &x, &y, n, cfg.samples, Noise::Sample(&mut noise))?;
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut model.params, &grads, &mut state)?;
            total += loss;
            batches += 1;
        }
        let mut entry = EpochLog {
            epoch,
            steps: state.step,
            train_loss: total / batches as f64,
            val_nll: None,
            val_rmse: None,
            val_error_rate: None,
        };
        if let Some(v) = val.filter(|v| !v.is_empty()) {
            if epoch % cfg.val_every.max(1) == 0 || epoch == cfg.epochs {
                let score = evaluate(model, v, cfg.eval_samples, cfg.seed)?;
                entry.val_nll = Some(score.nll);
                entry.val_rmse = Some(score.rmse);
                entry.val_error_rate = score.error_rate;
                if best.as_ref().is_none_or(|b| score.nll < b.1) {
                    best = Some((epoch, score.nll, model.params.values().to_vec()));
                }
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { log, best: best.map(|(e, _, p)| (e, p)) })
}
