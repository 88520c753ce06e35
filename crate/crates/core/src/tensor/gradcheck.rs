//! Central finite-difference gradient checking.
//!
//! The numerical side only ever calls [`Graph::forward`], so it is independent
//! of every backward rule it is used to verify.

use std::collections::HashMap;

use super::{Graph, NodeId, Result, Tensor};

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor used by [`check`], relative to `max(1, |L|)`: gradient
/// entries below `1e-5·|L|` are compared in absolute terms, since central
/// differences cannot resolve them above rounding error.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_leaf: usize,
    pub worst_index: usize,
    pub evaluations: usize,
    /// Stencils skipped because the two points straddle a ReLU or abs kink.
    pub straddled: usize,
}

fn eval_loss<F>(leaves: &[Tensor], build: &F) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().enumerate().map(|(i, t)| g.param(&format!("leaf{i}"), t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.forward(&HashMap::new())?;
    Ok((g.value(loss)?.item(), g.kink_signature()))
}

/// Compares the graph's analytic gradients of the scalar built by `build`
/// against central differences with step `h` for every element of every leaf.
pub fn check<F>(leaves: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().enumerate().map(|(i, t)| g.param(&format!("leaf{i}"), t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.forward(&HashMap::new())?;
    let grads = g.backward(loss)?;
    let floor = REL_FLOOR * g.value(loss)?.item().abs().max(1.0);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_leaf: 0,
        worst_index: 0,
        evaluations: 0,
        straddled: 0,
    };
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for j in 0..leaves[li].numel() {
            let orig = leaves[li].data()[j];
            work[li].data_mut()[j] = orig + h;
            let (plus, sig_plus) = eval_loss(&work, &build)?;
            work[li].data_mut()[j] = orig - h;
            let (minus, sig_minus) = eval_loss(&work, &build)?;
            work[li].data_mut()[j] = orig;
            report.evaluations += 2;
            if sig_plus != sig_minus {
                report.straddled += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.data()[j], numeric, floor);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_leaf = li;
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

/// Compares directional derivatives `vᵀ∇L` against `(L(θ+hv) − L(θ−hv)) / 2h`
/// for each direction `v`, given as one tensor per leaf. `worst_leaf` reports
/// the index of the worst direction.
pub fn check_directions<F>(leaves: &[Tensor], h: f64, directions: &[Vec<Tensor>], build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().enumerate().map(|(i, t)| g.param(&format!("leaf{i}"), t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.forward(&HashMap::new())?;
    let grads = g.backward(loss)?;
    let floor = REL_FLOOR * g.value(loss)?.item().abs().max(1.0);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_leaf: 0,
        worst_index: 0,
        evaluations: 0,
        straddled: 0,
    };
    for (di, dir) in directions.iter().enumerate() {
        let mut analytic = 0.0;
        for (id, v) in ids.iter().zip(dir) {
            analytic += grads.get(*id).data().iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        let shifted = |sign: f64| -> Result<(f64, Vec<bool>)> {
            let work: Vec<Tensor> = leaves
                .iter()
                .zip(dir)
                .map(|(t, v)| {
                    let mut t = t.clone();
                    t.axpy(sign * h, v)?;
                    Ok(t)
                })
                .collect::<Result<_>>()?;
            eval_loss(&work, &build)
        };
        let (plus, sig_plus) = shifted(1.0)?;
        let (minus, sig_minus) = shifted(-1.0)?;
        report.evaluations += 2;
        if sig_plus != sig_minus {
            report.straddled += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic, numeric, floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_leaf = di;
        }
    }
    Ok(report)
}

/// Reduces an arbitrary-shaped node to a scalar by a fixed random projection,
/// so every output element influences the checked loss with O(1) weight.
pub fn project(g: &mut Graph, node: NodeId, weights: Tensor) -> NodeId {
    let w = g.constant(weights);
    let prod = g.mul(node, w);
    g.sum(prod)
}
