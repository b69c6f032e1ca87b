//! Central finite-difference checks for reverse-mode gradients.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to verify.

use crate::autograd::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Summary of one gradient comparison.
#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// `(analytic, numeric)` at the worst relative error.
    pub worst: Option<(f64, f64)>,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((analytic, numeric));
        }
    }
}

/// Relative errors below this magnitude of gradient are measured against the
/// floor instead, so that exact zeros do not blow up the ratio.
pub const REL_FLOOR: f64 = 1e-6;

/// Compare gradients of a scalar function of several leaf tensors against
/// central differences over every element.
pub fn check_leaf_gradients<F>(inputs: &[Tensor], eps: f64, build: F) -> GradCheck
where
    F: Fn(&mut Graph<'_>, &[NodeId]) -> NodeId,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out);

    let mut report = GradCheck::default();
    let mut vals = inputs.to_vec();
    for (k, &id) in ids.iter().enumerate() {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let orig = vals[k].data()[i];
            vals[k].data_mut()[i] = orig + eps;
            let fp = eval(&vals);
            vals[k].data_mut()[i] = orig - eps;
            let fm = eval(&vals);
            vals[k].data_mut()[i] = orig;
            report.record(analytic.data()[i], (fp - fm) / (2.0 * eps), REL_FLOOR);
        }
    }
    report
}

/// Compare parameter gradients at selected `(parameter, element)` coordinates.
///
/// `build` must construct the same scalar from a graph bound to the given
/// store every time it is called.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    eps: f64,
    build: F,
) -> GradCheck
where
    F: Fn(&mut Graph<'_>) -> NodeId,
{
    let analytic: Vec<f64> = {
        let mut g = Graph::with_params(store, false, true);
        let out = build(&mut g);
        let grads = g.backward(out);
        coords
            .iter()
            .map(|&(p, i)| grads.param(p).map_or(0.0, |t| t.data()[i]))
            .collect()
    };
    let mut work = store.clone();
    let mut eval = |p: ParamId, i: usize, v: f64| -> f64 {
        let orig = work.get(p).data()[i];
        work.get_mut(p).data_mut()[i] = v;
        let mut g = Graph::with_params(&work, false, false);
        let out = build(&mut g);
        let val = g.value(out).item();
        drop(g);
        work.get_mut(p).data_mut()[i] = orig;
        val
    };
    let mut report = GradCheck::default();
    for (&(p, i), &a) in coords.iter().zip(&analytic) {
        let x = store.get(p).data()[i];
        let numeric = (eval(p, i, x + eps) - eval(p, i, x - eps)) / (2.0 * eps);
        report.record(a, numeric, REL_FLOOR);
    }
    report
}
