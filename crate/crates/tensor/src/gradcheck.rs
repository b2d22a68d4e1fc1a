//! Central-finite-difference verification of analytic gradients.

use crate::{Graph, NodeId, ParamStore, Result, TensorError};

/// Compare analytic gradients against central finite differences for every
/// coordinate of every parameter in `store`.
///
/// `build` receives a fresh graph plus the leaf node of each parameter in
/// store order and must return a scalar node. Returns the maximum relative
/// error `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(store: &ParamStore, build: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    assert!(eps > 0.0, "grad_check requires eps > 0");

    let run = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = s
            .iter()
            .map(|(name, _)| g.param(s, name))
            .collect::<Result<_>>()?;
        let root = build(&mut g, &leaves)?;
        if g.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot { shape: g.value(root).shape().to_vec() });
        }
        Ok(g.value(root).item())
    };

    // Analytic pass.
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = store
        .iter()
        .map(|(name, _)| g.param(store, name))
        .collect::<Result<_>>()?;
    let root = build(&mut g, &leaves)?;
    let grads = g.backward(root, store)?;

    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut max_rel = 0.0f64;
    for (pi, name) in names.iter().enumerate() {
        let numel = store.by_id(crate::ParamId(pi)).numel();
        for coord in 0..numel {
            let mut plus = store.clone();
            plus.tensors_mut()[pi].data_mut()[coord] += eps;
            let mut minus = store.clone();
            minus.tensors_mut()[pi].data_mut()[coord] -= eps;
            let f_plus = run(&plus)?;
            let f_minus = run(&minus)?;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(TensorError::NonFiniteProbe { param: name.clone(), coord });
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let analytic = grads.by_id(crate::ParamId(pi)).data()[coord];
            if !analytic.is_finite() {
                return Err(TensorError::NonFiniteProbe { param: name.clone(), coord });
            }
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
