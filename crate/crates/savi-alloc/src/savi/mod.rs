//! SAVI solvers: naive synchronous ascent, the accurate recursive schedules
//! with back-propagation through gradient ascent, the Θ(KN) approximation,
//! windowed gradients, and Hessian-vector products.

mod approx;
mod engine;
mod naive;
mod trace;

pub use approx::{approx_hypergradient, savi_approx};
pub use engine::{grad_2level, grad_dag, savi_accurate_2level, savi_accurate_dag, solve_suffix};
pub use naive::savi_naive;
pub use trace::{ExecutionTrace, TraceAction, TraceEvent};

use nalgebra::DVector;

use crate::graph::NodeId;
use crate::model::{FrameData, LatentState, LatentValues, Model, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SaviVariant {
    Naive,
    Accurate2,
    AccurateDag,
    Approx,
    ApproxScalable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpMode {
    Analytic,
    FiniteDifference,
}

/// When the approximated variant re-initializes a node's descendants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxReinit {
    /// Fresh FAVI descendants before every hypergradient evaluation.
    PerStep,
    /// One FAVI sweep per node, before its K ascent steps.
    OncePerNode,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SaviConfig {
    pub variant: SaviVariant,
    /// Gradient ascent steps K per latent.
    pub steps: usize,
    pub learning_rate: f64,
    /// Window C for the scalable variant; `None` means full likelihood.
    pub window: Option<usize>,
    pub hvp_mode: HvpMode,
    /// Finite-difference step r; `None` selects the scale-aware default.
    pub fd_step: Option<f64>,
    pub record_trace: bool,
    pub approx_reinit: ApproxReinit,
    /// Cap on total objective-gradient evaluations per run.
    pub eval_budget: u64,
}

impl SaviConfig {
    pub fn new(variant: SaviVariant, steps: usize, learning_rate: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        Self {
            variant,
            steps,
            learning_rate,
            window: None,
            hvp_mode: HvpMode::Analytic,
            fd_step: None,
            record_trace: false,
            approx_reinit: ApproxReinit::PerStep,
            eval_budget: 1_000_000,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }

    pub fn with_window(mut self, c: usize) -> Self {
        self.window = Some(c);
        self
    }

    pub fn with_hvp_mode(mut self, m: HvpMode) -> Self {
        self.hvp_mode = m;
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SaviError {
    #[error("latent {node} became non-finite at step {step}")]
    DivergenceDetected {
        node: NodeId,
        step: usize,
        /// State at the moment of divergence, for diagnosis.
        state: Box<LatentValues>,
    },
    #[error("gradient evaluation budget of {limit} exceeded")]
    BudgetExceeded { limit: u64 },
    #[error(transparent)]
    Dimension(#[from] ModelError),
}

/// Scale-aware finite-difference step: r = 1e-5 (1 + ||y||) / max(||v||, 1e-12).
pub fn default_fd_step(y: &DVector<f64>, v: &DVector<f64>) -> f64 {
    1e-5 * (1.0 + y.norm()) / v.norm().max(1e-12)
}

pub(crate) fn check_finite(
    values: &LatentValues,
    node: NodeId,
    step: usize,
) -> Result<(), SaviError> {
    if values.get(node).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SaviError::DivergenceDetected {
            node,
            step,
            state: Box::new(values.clone()),
        })
    }
}

/// FAVI initialization of all real nodes in topological order.
pub(crate) fn favi_sweep<M: Model>(
    model: &M,
    frames: &FrameData,
    values: &mut LatentValues,
    trace: Option<&mut ExecutionTrace>,
) {
    let mut trace = trace;
    for &n in model.graph().topo_order() {
        let y0 = model.favi_init(frames, values, n);
        values.set(n, y0);
        if let Some(t) = trace.as_deref_mut() {
            t.push(n, 0, TraceAction::Init);
        }
    }
}

/// Hessian-vector product (d^2 L / dy_i dy_j) v, analytic or by forward
/// finite differences of the partial gradient (Eq. of the FD reduction).
pub fn hvp<M: Model>(
    model: &M,
    frames: &FrameData,
    state: &LatentState,
    i: NodeId,
    j: NodeId,
    v: &DVector<f64>,
    mode: HvpMode,
    r: Option<f64>,
) -> Result<DVector<f64>, ModelError> {
    let d_j = model.graph().latent_dim(j);
    if v.len() != d_j {
        return Err(ModelError::DimensionMismatch {
            context: "hvp direction",
            expected: d_j,
            got: v.len(),
        });
    }
    match mode {
        HvpMode::Analytic => Ok(model.hessian_block(frames, &state.values, i, j) * v),
        HvpMode::FiniteDifference => {
            let r = r.unwrap_or_else(|| default_fd_step(state.values.get(j), v));
            let mut plus = state.values.clone();
            plus.set(j, state.values.get(j) + v * r);
            let g_plus = model.grad_partial(frames, &plus, i);
            let g0 = model.grad_partial(frames, &state.values, i);
            Ok((g_plus - g0) / r)
        }
    }
}

/// Windowed gradient: total derivative of the likelihood restricted to the
/// window of frames [i, i+C] (by topological position), with later nodes
/// treated as FAVI re-initializations of their parents. `None` = full GoP.
pub fn windowed_gradient<M: Model>(
    model: &M,
    frames: &FrameData,
    state: &LatentState,
    i: NodeId,
    c: Option<usize>,
) -> DVector<f64> {
    let graph = model.graph();
    let pos_i = graph.topo_position(i);
    let last = match c {
        None => usize::MAX,
        Some(c) => pos_i.saturating_add(c),
    };
    let in_window = |n: NodeId| {
        let p = graph.topo_position(n);
        p >= pos_i && p <= last
    };
    // Reverse accumulation over window nodes: u_j = dL_W/dy_j with nodes
    // after i treated as FAVI functions of their parents.
    let order: Vec<NodeId> = graph
        .topo_order()
        .iter()
        .copied()
        .filter(|&n| in_window(n))
        .collect();
    let mut adjoint: Vec<Option<DVector<f64>>> = vec![None; graph.node_count()];
    for &j in order.iter().rev() {
        let mut u = DVector::zeros(graph.latent_dim(j));
        // Direct contributions of frames in the window.
        for &f in &order {
            if f == j || graph.parents(f).contains(&j) {
                u += model.frame_grad_partial(frames, &state.values, f, j);
            }
        }
        // FAVI chain contributions of later window nodes.
        for &child in graph.children(j) {
            if in_window(child) {
                if let Some(uc) = &adjoint[child.0] {
                    u += model.favi_jacobian(frames, &state.values, child, j).transpose() * uc;
                }
            }
        }
        adjoint[j.0] = Some(u);
    }
    adjoint[i.0].take().expect("node is in its own window")
}

#[cfg(test)]
mod tests;
