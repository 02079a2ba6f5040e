use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AdError;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter and flat entry holding the worst error.
    pub worst: Option<(String, usize)>,
}

fn rel_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (fd.abs() + 1e-8)
}

fn evaluate<E, F>(f: &F, values: &[Tensor]) -> Result<f64, E>
where
    E: From<AdError>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
{
    let tape = Tape::new();
    tape.set_check_finite(true);
    let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
    let y = f(&tape, &vars)?;
    if let Some(primitive) = tape.first_nonfinite() {
        return Err(AdError::NonFinite { primitive }.into());
    }
    Ok(y.item())
}

/// Compares reverse-mode gradients with central differences for every entry
/// of every parameter in `store`. The objective must be deterministic.
pub fn check_param_gradients<E, F>(store: &ParamStore, f: F, step: f64) -> Result<GradCheck, E>
where
    E: From<AdError>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let tape = Tape::new();
    tape.set_check_finite(true);
    let vars = store.bind(&tape);
    let y = f(&tape, &vars)?;
    if let Some(primitive) = tape.first_nonfinite() {
        return Err(AdError::NonFinite { primitive }.into());
    }
    let grads = tape.backward(y)?;
    let mut values: Vec<Tensor> = store.values().to_vec();
    let mut out = GradCheck { max_rel_error: 0.0, worst: None };
    for id in store.ids() {
        let ad = grads.get(vars[id.0]);
        for k in 0..values[id.0].len() {
            let orig = values[id.0].data()[k];
            values[id.0].data_mut()[k] = orig + step;
            let fp = evaluate(&f, &values)?;
            values[id.0].data_mut()[k] = orig - step;
            let fm = evaluate(&f, &values)?;
            values[id.0].data_mut()[k] = orig;
            let err = rel_error(ad.data()[k], (fp - fm) / (2.0 * step));
            if err > out.max_rel_error || out.worst.is_none() {
                out.max_rel_error = out.max_rel_error.max(err);
                if err >= out.max_rel_error {
                    out.worst = Some((store.name(id).to_string(), k));
                }
            }
        }
    }
    Ok(out)
}

/// Max relative error between the reverse-mode gradient of scalar `f` at `x`
/// and central differences with the given step.
pub fn check_gradient<E, F>(f: F, x: &Tensor, step: f64) -> Result<f64, E>
where
    E: From<AdError>,
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
{
    let mut store = ParamStore::new();
    store.add("x", x.clone());
    check_param_gradients(&store, |tape, vars| f(tape, vars[0]), step).map(|r| r.max_rel_error)
}
