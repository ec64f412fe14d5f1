//! Central finite-difference gradient checking.
//!
//! Uses only forward evaluations, so it is independent of the reverse-mode
//! path it verifies. Intended for tests; run in double precision.

use super::elem::Elem;
use super::graph::{ParamId, ParamStore};

/// Worst relative error between analytic gradients already accumulated in
/// `store` and central differences of `loss_fn`, probed at the given
/// `(parameter, element)` coordinates.
pub fn max_rel_error<E: Elem>(
    store: &ParamStore<E>,
    loss_fn: impl Fn(&ParamStore<E>) -> E,
    probes: &[(ParamId, usize)],
    step: E,
) -> f64 {
    let mut worst = 0.0f64;
    for &(id, idx) in probes {
        let mut plus = store.clone();
        plus.value_mut(id).data_mut()[idx] += step;
        let lp = loss_fn(&plus).to_f64();
        let mut minus = store.clone();
        minus.value_mut(id).data_mut()[idx] -= step;
        let lm = loss_fn(&minus).to_f64();
        let numeric = (lp - lm) / (2.0 * step.to_f64());
        let analytic = store.grad(id).data()[idx].to_f64();
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
