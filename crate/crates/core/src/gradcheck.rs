//! Central finite-difference verification of analytic gradients.
//!
//! Used by the per-module gradient tests and the acceptance suite. The check
//! perturbs every parameter element of a store, rebuilds the loss with a
//! no-grad graph, and compares the central difference against the backward
//! pass at a relative tolerance.

use crate::graph::{Graph, Var};
use crate::nn::{param_grads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Gradients smaller than this on both sides are below central-difference
/// resolution and are not compared.
const FD_FLOOR: f64 = 1e-6;

/// Mean-squared-error loss against a fixed target, as a scalar graph node.
/// Mean scaling keeps the loss O(1) so finite-difference roundoff stays well
/// below the check tolerance.
pub fn sum_sq_loss(g: &mut Graph, y: Var, target: &Tensor) -> Var {
    let t = g.constant(target.clone());
    let d = g.sub(y, t);
    let ss = g.sum_sq(d);
    g.scale(ss, 1.0 / target.len() as f64)
}

/// Check every parameter element of `store` against central differences.
///
/// `build` must construct the loss from scratch on the given graph; it is
/// called once with gradients enabled and twice per element without.
/// Panics with context on the first element that exceeds `tol` relative
/// error (with a 1e-6 absolute floor on the denominator).
pub fn check_param_grads(
    store: &mut ParamStore,
    eps: f64,
    tol: f64,
    build: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> GradCheckReport {
    let mut g = Graph::new(true);
    let loss = build(&mut g, store);
    let mut grads = g.backward(loss);
    let analytic = param_grads(&g, &mut grads, store.len());

    let mut checked = 0usize;
    let mut max_rel: f64 = 0.0;
    for pid in store.ids().collect::<Vec<_>>() {
        let n = store.get(pid).len();
        for i in 0..n {
            let orig = store.get(pid).data()[i];
            store.get_mut(pid).data_mut()[i] = orig + eps;
            let lp = eval_loss(&build, store);
            store.get_mut(pid).data_mut()[i] = orig - eps;
            let lm = eval_loss(&build, store);
            store.get_mut(pid).data_mut()[i] = orig;

            let fd = (lp - lm) / (2.0 * eps);
            let an = analytic[pid_index(pid)].as_ref().map(|t| t.data()[i]).unwrap_or(0.0);
            checked += 1;
            if fd.abs() < FD_FLOOR && an.abs() < FD_FLOOR {
                // below finite-difference resolution on both sides
                continue;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(
                rel <= tol,
                "gradient mismatch for {}[{}]: finite-diff {fd:e} vs analytic {an:e} (rel {rel:e})",
                store.name(pid),
                i
            );
            max_rel = max_rel.max(rel);
        }
    }
    GradCheckReport { checked, max_rel_err: max_rel }
}

fn pid_index(id: ParamId) -> usize {
    id.0
}

fn eval_loss(build: &impl Fn(&mut Graph, &ParamStore) -> Var, store: &ParamStore) -> f64 {
    let mut g = Graph::new(false);
    let v = build(&mut g, store);
    g.scalar_value(v)
}
