//! Central finite-difference gradient checking, used by the test suites to
//! validate every backward rule against an independent numeric oracle.

use crate::nn::graph::GradMap;
use crate::nn::layers::ParamStore;

/// Step used by the central difference oracle, scaled by coordinate size.
pub const FD_STEP: f64 = 1e-5;

/// Absolute discrepancy below which a coordinate counts as matching even if
/// the relative error is large (both sides are numerically zero).
pub const FD_ABS_PASS: f64 = 1e-7;

/// Runs `f` (a scalar loss plus analytic gradients) against central finite
/// differences over every coordinate of every store entry and returns the
/// largest relative discrepancy. Coordinates whose absolute discrepancy is
/// below [`FD_ABS_PASS`] contribute zero.
pub fn max_grad_discrepancy(
    store: &mut ParamStore,
    f: &dyn Fn(&ParamStore) -> (f64, GradMap),
) -> f64 {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let (_, grads) = f(store);
    let mut worst: f64 = 0.0;
    for name in &names {
        let (rows, cols) = store.get(name).shape();
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.get(name).get(r, c);
                let h = FD_STEP * orig.abs().max(1.0);
                store.get_mut(name).set(r, c, orig + h);
                let up = f(store).0;
                store.get_mut(name).set(r, c, orig - h);
                let down = f(store).0;
                store.get_mut(name).set(r, c, orig);
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[name].get(r, c);
                let abs = (analytic - numeric).abs();
                if abs < FD_ABS_PASS {
                    continue;
                }
                let rel = abs / analytic.abs().max(numeric.abs()).max(1e-12);
                worst = worst.max(rel);
            }
        }
    }
    worst
}
