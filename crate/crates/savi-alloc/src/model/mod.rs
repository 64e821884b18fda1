//! Differentiable GoP model interface and concrete analytic surrogates.
//!
//! A model exposes per-frame rate and per-pixel distortion, the GoP objective
//! `L = sum_i -(R_i + lambda0^T D_i)`, analytic first and second derivatives,
//! and a FAVI initializer with its Jacobian. Two families are provided:
//! [`GopModel`], a chain/diamond codec surrogate, and [`TwoLevelQuadratic`],
//! a 2-level latent model with a closed-form global optimum.

mod gop;
mod two_level;

pub use gop::{generate_frames, GopModel, GopModelSpec, Nonlinearity};
pub use two_level::{two_level_quadratic, TwoLevelParams, TwoLevelQuadratic};

use nalgebra::{DMatrix, DVector};

use crate::graph::{LatentGraph, NodeId};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Observed data, one vector per real node (frame i maps to node i).
#[derive(Debug, Clone)]
pub struct FrameData {
    frames: Vec<DVector<f64>>,
}

impl FrameData {
    pub fn new(frames: Vec<DVector<f64>>) -> Self {
        Self { frames }
    }

    /// Observation for real node `i` (1-based).
    pub fn frame(&self, i: NodeId) -> &DVector<f64> {
        &self.frames[i.0 - 1]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.frames.iter()
    }
}

/// Latent vectors for every node; the root holds an empty vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentValues(Vec<DVector<f64>>);

impl LatentValues {
    pub fn zeros(graph: &LatentGraph) -> Self {
        Self(
            (0..graph.node_count())
                .map(|i| DVector::zeros(graph.latent_dim(NodeId(i))))
                .collect(),
        )
    }

    pub fn get(&self, i: NodeId) -> &DVector<f64> {
        &self.0[i.0]
    }

    pub fn set(&mut self, i: NodeId, v: DVector<f64>) {
        self.0[i.0] = v;
    }

    pub fn node_count(&self) -> usize {
        self.0.len()
    }

    /// Real-node values stacked in node-index order.
    pub fn stacked(&self) -> DVector<f64> {
        let total: usize = self.0[1..].iter().map(|v| v.len()).sum();
        let mut out = DVector::zeros(total);
        let mut off = 0;
        for v in &self.0[1..] {
            out.rows_mut(off, v.len()).copy_from(v);
            off += v.len();
        }
        out
    }
}

/// Current latent values plus per-node step counters and the evaluation
/// ledger used by the complexity assertions.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub values: LatentValues,
    /// Gradient ascent steps completed per node.
    pub steps: Vec<usize>,
    /// Objective-gradient evaluations per node.
    pub eval_counter: Vec<u64>,
    /// Hypergradient evaluations per node (outer updates in approx/accurate).
    pub hypergrad_counter: Vec<u64>,
}

impl LatentState {
    pub fn new(graph: &LatentGraph) -> Self {
        let n = graph.node_count();
        Self {
            values: LatentValues::zeros(graph),
            steps: vec![0; n],
            eval_counter: vec![0; n],
            hypergrad_counter: vec![0; n],
        }
    }

    pub fn total_evals(&self) -> u64 {
        self.eval_counter.iter().sum()
    }

    pub fn total_hypergrad_evals(&self) -> u64 {
        self.hypergrad_counter.iter().sum()
    }
}

/// Per-frame objective decomposition `L_i = -(R_i + lambda0^T D_i)`.
#[derive(Debug, Clone)]
pub struct ObjectiveBreakdown {
    pub rates: Vec<f64>,
    pub distortions: Vec<DVector<f64>>,
    pub frame_objectives: Vec<f64>,
    pub total: f64,
}

impl ObjectiveBreakdown {
    pub fn gop_cost(&self) -> f64 {
        -self.total
    }
}

/// Differentiable GoP model: the interface the SAVI and allocation code
/// programs against.
pub trait Model {
    fn graph(&self) -> &LatentGraph;

    /// Per-pixel trade-off vector lambda0.
    fn lambda0(&self) -> &DVector<f64>;

    /// FAVI initialization of node `i` from its parents' current values.
    fn favi_init(&self, frames: &FrameData, values: &LatentValues, i: NodeId) -> DVector<f64>;

    /// Jacobian d y_i^0 / d y_parent of the FAVI initializer, evaluated at
    /// the parent values stored in `values`.
    fn favi_jacobian(
        &self,
        frames: &FrameData,
        values: &LatentValues,
        child: NodeId,
        parent: NodeId,
    ) -> DMatrix<f64>;

    /// Full per-frame breakdown. Pure: no counters are touched.
    fn objective(&self, frames: &FrameData, values: &LatentValues) -> ObjectiveBreakdown;

    /// Partial derivative dL/dy_i with every latent held free.
    fn grad_partial(&self, frames: &FrameData, values: &LatentValues, i: NodeId) -> DVector<f64>;

    /// Partial derivative dL_frame/dy_wrt of a single frame's objective.
    fn frame_grad_partial(
        &self,
        frames: &FrameData,
        values: &LatentValues,
        frame: NodeId,
        wrt: NodeId,
    ) -> DVector<f64>;

    /// Analytic second derivative block d^2 L / dy_i dy_j, with entry (a, b)
    /// equal to d^2 L / dy_i[a] dy_j[b].
    fn hessian_block(
        &self,
        frames: &FrameData,
        values: &LatentValues,
        i: NodeId,
        j: NodeId,
    ) -> DMatrix<f64>;
}

/// Counted objective-gradient evaluation: increments the state's ledger.
pub fn grad_objective<M: Model>(
    model: &M,
    frames: &FrameData,
    state: &mut LatentState,
    i: NodeId,
) -> DVector<f64> {
    state.eval_counter[i.0] += 1;
    model.grad_partial(frames, &state.values, i)
}
