//! Finite-difference gradient checking.
//!
//! Compares backward-pass gradients against central differences
//! `(f(x+eps) - f(x-eps)) / 2eps` per input coordinate. The builder closure
//! is re-run for every probe, so it must be deterministic.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default probe step for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Relative-error denominators are floored at this value so coordinates with
/// near-zero gradients do not inflate the ratio into noise.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckReport {
    /// max_i |analytic_i - fd_i| / max(|analytic_i|, |fd_i|, REL_FLOOR)
    pub max_rel_err: f64,
    /// Coordinates where either side evaluated to NaN.
    pub nan_coords: usize,
}

/// Check the gradient of a scalar-valued tensor function at `inputs`.
///
/// `build` receives a fresh graph and one leaf per input (gradient-enabled on
/// the analytic pass) and must return the scalar loss node.
pub fn grad_check<F, B>(build: B, inputs: &[Tensor<F>], eps: f64) -> Result<GradCheckReport>
where
    F: Scalar,
    B: Fn(&mut Graph<F>, &[NodeId]) -> Result<NodeId>,
{
    // Analytic gradients.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t, true)).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<F>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("input gradient populated").to_vec())
        .collect();

    let eval = |probe: &[Tensor<F>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = probe.iter().map(|t| g.leaf(t, false)).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.scalar_value(loss).to_f64())
    };

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor<F>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + F::from_f64(eps);
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - F::from_f64(eps);
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic[i][j].to_f64();
            if !fd.is_finite() || !an.is_finite() {
                report.nan_coords += 1;
                continue;
            }
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(REL_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
        }
    }
    Ok(report)
}
