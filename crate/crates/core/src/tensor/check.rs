//! Central finite-difference gradient oracle.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_scalar(g: &Graph, y: Var) -> Result<f64> {
    let v = g.value(y).item()?;
    if !v.is_finite() {
        return Err(Error::NumericDomain("objective is not finite".into()));
    }
    Ok(v)
}

/// Compares the tape gradient of a scalar function of `theta` against central
/// differences; returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(theta: &Tensor, eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let x = g.leaf(theta.clone())?;
    let y = f(&mut g, x)?;
    eval_scalar(&g, y)?;
    let analytic = g
        .backward(y)?
        .wrt(x)
        .expect("leaf requires grad");

    let mut probe = theta.clone();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        let mut eval_at = |v: f64| -> Result<f64> {
            probe.data_mut()[i] = v;
            let mut g = Graph::new();
            let x = g.constant(probe.clone())?;
            let y = f(&mut g, x)?;
            eval_scalar(&g, y)
        };
        let plus = eval_at(orig + eps)?;
        let minus = eval_at(orig - eps)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], (plus - minus) / (2.0 * eps)));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct ParamCheckReport {
    /// Max relative error over every coordinate of every trainable parameter.
    pub max_rel_err: f64,
    /// Name and error of the worst coordinate.
    pub worst_param: String,
    pub coordinates: usize,
    /// True when no frozen parameter received a gradient entry.
    pub frozen_untouched: bool,
}

/// Finite-difference check over every trainable parameter of `store`.
/// `objective` must rebuild the scalar loss on the graph it is handed.
pub fn param_grad_check<F>(store: &mut ParamStore, eps: f64, mut objective: F) -> Result<ParamCheckReport>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let (analytic, frozen_untouched) = {
        let mut g = Graph::with_params(store);
        let y = objective(&mut g)?;
        eval_scalar(&g, y)?;
        let grads = g.backward(y)?;
        let frozen_untouched = store
            .iter()
            .filter(|(_, p)| p.frozen)
            .all(|(id, _)| grads.param(id).is_none());
        let analytic: Vec<(ParamId, Vec<f64>)> = store
            .trainable()
            .map(|id| {
                let g = grads
                    .param(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.value(id).len()]);
                (id, g)
            })
            .collect();
        (analytic, frozen_untouched)
    };

    let mut report = ParamCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        coordinates: 0,
        frozen_untouched,
    };
    for (id, grad) in analytic {
        for (i, &a) in grad.iter().enumerate() {
            let orig = store.value(id).data()[i];
            let mut eval_at = |store: &mut ParamStore, v: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[i] = v;
                let mut g = Graph::with_params(store);
                let y = objective(&mut g)?;
                eval_scalar(&g, y)
            };
            let plus = eval_at(store, orig + eps)?;
            let minus = eval_at(store, orig - eps)?;
            store.value_mut(id).data_mut()[i] = orig;
            let err = rel_err(a, (plus - minus) / (2.0 * eps));
            report.coordinates += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = format!("{}[{i}]", store.get(id).name);
            }
        }
    }
    Ok(report)
}
