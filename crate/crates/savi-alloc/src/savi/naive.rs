//! Original SAVI: synchronous partial-derivative ascent on all latents.

use crate::graph::NodeId;
use crate::model::{grad_objective, FrameData, LatentState, Model};

use super::{check_finite, favi_sweep, ExecutionTrace, SaviConfig, SaviError, TraceAction};

/// All nodes FAVI-initialized once in topological order, then K synchronous
/// sweeps `y_i <- y_i + alpha dL/dy_i` using partial derivatives evaluated at
/// the common previous step.
pub fn savi_naive<M: Model>(
    model: &M,
    frames: &FrameData,
    cfg: &SaviConfig,
) -> Result<(LatentState, ExecutionTrace), SaviError> {
    let graph = model.graph();
    let mut state = LatentState::new(graph);
    let mut trace = ExecutionTrace::new();
    favi_sweep(
        model,
        frames,
        &mut state.values,
        cfg.record_trace.then_some(&mut trace),
    );
    for &n in graph.topo_order() {
        check_finite(&state.values, n, 0)?;
    }
    for k in 0..cfg.steps {
        let grads: Vec<(NodeId, _)> = graph
            .topo_order()
            .iter()
            .map(|&n| {
                let g = grad_objective(model, frames, &mut state, n);
                (n, g)
            })
            .collect();
        for (n, g) in grads {
            let y = state.values.get(n) + g * cfg.learning_rate;
            state.values.set(n, y);
            state.steps[n.0] = k + 1;
            check_finite(&state.values, n, k + 1)?;
            if cfg.record_trace {
                trace.push(n, k + 1, TraceAction::Ascent);
            }
        }
        if state.total_evals() > cfg.eval_budget {
            return Err(SaviError::BudgetExceeded {
                limit: cfg.eval_budget,
            });
        }
    }
    Ok((state, trace))
}
