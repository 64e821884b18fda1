//! Approximated SAVI: Θ(KN) topological sweep with descendants held at their
//! FAVI initialization when the hypergradient is evaluated.

use nalgebra::DVector;

use crate::graph::NodeId;
use crate::model::{FrameData, LatentState, Model};

use super::{
    check_finite, windowed_gradient, ApproxReinit, ExecutionTrace, SaviConfig, SaviError,
    TraceAction,
};

/// Approximate hypergradient dL/dy_i with descendants at FAVI step 0;
/// `window` restricts the likelihood to C future frames (scalable variant).
pub fn approx_hypergradient<M: Model>(
    model: &M,
    frames: &FrameData,
    state: &LatentState,
    i: NodeId,
    window: Option<usize>,
) -> DVector<f64> {
    windowed_gradient(model, frames, state, i, window)
}

/// Alg.-style topological sweep: node i receives exactly K ascent steps with
/// nodes after i re-initialized from FAVI (per step or once per node), giving
/// exactly N*K hypergradient evaluations.
pub fn savi_approx<M: Model>(
    model: &M,
    frames: &FrameData,
    cfg: &SaviConfig,
) -> Result<(LatentState, ExecutionTrace), SaviError> {
    let graph = model.graph();
    let mut state = LatentState::new(graph);
    let mut trace = ExecutionTrace::new();
    let order: Vec<NodeId> = graph.topo_order().to_vec();
    for (idx, &i) in order.iter().enumerate() {
        // Re-initialize y_i..y_N from FAVI given the frozen prefix.
        reinit_tail(model, frames, &mut state, &order[idx..], cfg, &mut trace)?;
        for k in 0..cfg.steps {
            if k > 0 && cfg.approx_reinit == ApproxReinit::PerStep {
                // Fresh descendants before every hypergradient evaluation.
                reinit_tail(model, frames, &mut state, &order[idx + 1..], cfg, &mut trace)?;
            }
            let g = approx_hypergradient(model, frames, &state, i, cfg.window);
            state.hypergrad_counter[i.0] += 1;
            if state.total_hypergrad_evals() > cfg.eval_budget {
                return Err(SaviError::BudgetExceeded {
                    limit: cfg.eval_budget,
                });
            }
            let y = state.values.get(i) + g * cfg.learning_rate;
            state.values.set(i, y);
            state.steps[i.0] = k + 1;
            check_finite(&state.values, i, k + 1)?;
            if cfg.record_trace {
                trace.push(i, k + 1, TraceAction::Ascent);
            }
        }
    }
    Ok((state, trace))
}

fn reinit_tail<M: Model>(
    model: &M,
    frames: &FrameData,
    state: &mut LatentState,
    tail: &[NodeId],
    cfg: &SaviConfig,
    trace: &mut ExecutionTrace,
) -> Result<(), SaviError> {
    for &n in tail {
        let y0 = model.favi_init(frames, &state.values, n);
        state.values.set(n, y0);
        state.steps[n.0] = 0;
        check_finite(&state.values, n, 0)?;
        if cfg.record_trace {
            trace.push(n, 0, TraceAction::Init);
        }
    }
    Ok(())
}
