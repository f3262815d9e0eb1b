//! Finite-difference verification of analytic gradients at model scale.

use std::collections::BTreeMap;

use rand::Rng;

use super::optim::ParamStore;

/// Compare analytic parameter gradients against central finite differences
/// of a black-box loss.
///
/// `loss_fn` must be a pure function of the store (fresh tape inside).
/// `grads` are the analytic gradients for the parameters to check. For each
/// named parameter, up to `probes_per_param` coordinates are sampled; the
/// maximum relative error across all probed coordinates is returned.
/// Relative error uses `|a - fd| / max(|a|, |fd|, floor)` with a small floor
/// so near-zero pairs compare absolutely.
pub fn fd_check_params<R: Rng>(
    store: &mut ParamStore,
    loss_fn: &dyn Fn(&ParamStore) -> f64,
    grads: &BTreeMap<String, Vec<f64>>,
    probes_per_param: usize,
    h: f64,
    rng: &mut R,
) -> f64 {
    let mut max_rel = 0.0f64;
    let names: Vec<String> = grads.keys().cloned().collect();
    for name in &names {
        let n = store.get(name).numel();
        let analytic = &grads[name];
        assert_eq!(analytic.len(), n, "gradient length mismatch for {name}");
        let probes: Vec<usize> = if n <= probes_per_param {
            (0..n).collect()
        } else {
            (0..probes_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for ci in probes {
            let orig = store.get(name).data[ci];
            store.get_mut(name).data[ci] = orig + h;
            let up = loss_fn(store);
            store.get_mut(name).data[ci] = orig - h;
            let down = loss_fn(store);
            store.get_mut(name).data[ci] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[ci];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
