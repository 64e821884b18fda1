//! Independent verification machinery: unrolled finite-difference
//! hypergradients and closed-form quadratic optima.
//!
//! Oracles never call the adjoint backward sweeps they validate. The only
//! shared code is the forward inner-optimization schedule
//! ([`crate::savi::solve_suffix`]); the outer derivative here is numerical.

use nalgebra::{DMatrix, DVector};

use crate::graph::NodeId;
use crate::model::{FrameData, LatentState, LatentValues, Model};
use crate::savi::{solve_suffix, SaviConfig, SaviError};

/// Coordinate-wise FD caps at this dimension to keep oracle runs fast.
pub const FD_DIM_CAP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdScheme {
    Forward,
    Central,
}

#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub fd_step: f64,
    pub scheme: FdScheme,
    pub convergence_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            scheme: FdScheme::Central,
            convergence_tol: 1e-9,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("dimension {dim} exceeds the coordinate-wise FD cap {cap}")]
    GuardExceeded { dim: usize, cap: usize },
    #[error("stacked gradient system is singular")]
    SingularSystem,
    #[error(transparent)]
    Savi(#[from] SaviError),
}

/// Evaluates L(prefix, value at node i, suffix solved by the exact SAVI
/// forward schedule).
fn objective_after_inner<M: Model>(
    model: &M,
    frames: &FrameData,
    prefix: &LatentValues,
    i: NodeId,
    value: &DVector<f64>,
    savi_cfg: &SaviConfig,
) -> Result<f64, SaviError> {
    let mut values = prefix.clone();
    values.set(i, value.clone());
    solve_suffix(model, frames, &mut values, Some(i), savi_cfg)?;
    Ok(model.objective(frames, &values).total)
}

/// Numerical hypergradient of value -> L(value, descendants re-optimized by
/// the K-step SAVI schedule), coordinate by coordinate.
pub fn unrolled_hypergradient<M: Model>(
    model: &M,
    frames: &FrameData,
    prefix: &LatentValues,
    i: NodeId,
    savi_cfg: &SaviConfig,
    oracle_cfg: &OracleConfig,
) -> Result<DVector<f64>, OracleError> {
    let d = model.graph().latent_dim(i);
    if d > FD_DIM_CAP {
        return Err(OracleError::GuardExceeded {
            dim: d,
            cap: FD_DIM_CAP,
        });
    }
    let y = prefix.get(i).clone();
    let h = oracle_cfg.fd_step;
    let mut g = DVector::zeros(d);
    for c in 0..d {
        let mut plus = y.clone();
        plus[c] += h;
        let lp = objective_after_inner(model, frames, prefix, i, &plus, savi_cfg)?;
        g[c] = match oracle_cfg.scheme {
            FdScheme::Central => {
                let mut minus = y.clone();
                minus[c] -= h;
                let lm = objective_after_inner(model, frames, prefix, i, &minus, savi_cfg)?;
                (lp - lm) / (2.0 * h)
            }
            FdScheme::Forward => {
                let l0 = objective_after_inner(model, frames, prefix, i, &y, savi_cfg)?;
                (lp - l0) / h
            }
        };
    }
    Ok(g)
}

/// Closed-form maximizer of a concave-quadratic objective: solves the
/// stacked linear system grad L = 0 by LU.
pub fn quadratic_global_optimum<M: Model>(
    model: &M,
    frames: &FrameData,
) -> Result<LatentState, OracleError> {
    let graph = model.graph();
    let order = graph.topo_order();
    let zeros = LatentValues::zeros(graph);
    let dims: Vec<usize> = order.iter().map(|&n| graph.latent_dim(n)).collect();
    let total: usize = dims.iter().sum();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();

    // grad(y) = g0 + H y on a quadratic objective.
    let mut g0 = DVector::zeros(total);
    let mut h = DMatrix::zeros(total, total);
    for (bi, &ni) in order.iter().enumerate() {
        g0.rows_mut(offsets[bi], dims[bi])
            .copy_from(&model.grad_partial(frames, &zeros, ni));
        for (bj, &nj) in order.iter().enumerate() {
            h.view_mut((offsets[bi], offsets[bj]), (dims[bi], dims[bj]))
                .copy_from(&model.hessian_block(frames, &zeros, ni, nj));
        }
    }
    let y = h.lu().solve(&(-g0)).ok_or(OracleError::SingularSystem)?;

    let mut state = LatentState::new(graph);
    for (bi, &ni) in order.iter().enumerate() {
        state.values.set(ni, y.rows(offsets[bi], dims[bi]).into_owned());
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{two_level_quadratic, TwoLevelParams};
    use crate::savi::{grad_2level, SaviConfig, SaviVariant};

    #[test]
    fn k0_oracle_equals_chain_rule_gradient() {
        let (model, frames) = two_level_quadratic(TwoLevelParams::new(3, 2, 4, 40));
        let mut prefix = LatentValues::zeros(model.graph());
        let y1 = DVector::from_vec(vec![0.2, -0.4, 0.6]);
        prefix.set(NodeId(1), y1.clone());
        let cfg = SaviConfig::new(SaviVariant::Accurate2, 0, 0.05);
        let o = unrolled_hypergradient(
            &model,
            &frames,
            &prefix,
            NodeId(1),
            &cfg,
            &OracleConfig::default(),
        )
        .unwrap();
        let g = grad_2level(&model, &frames, &y1, &cfg).unwrap();
        assert!((&o - &g).norm() / g.norm() < 1e-6, "rel {}", (&o - &g).norm() / g.norm());
    }

    #[test]
    fn dimension_guard_fires() {
        let (model, frames) = two_level_quadratic(TwoLevelParams::new(FD_DIM_CAP + 1, 2, 4, 41));
        let prefix = LatentValues::zeros(model.graph());
        let cfg = SaviConfig::new(SaviVariant::Accurate2, 1, 0.05);
        assert!(matches!(
            unrolled_hypergradient(
                &model,
                &frames,
                &prefix,
                NodeId(1),
                &cfg,
                &OracleConfig::default()
            ),
            Err(OracleError::GuardExceeded { .. })
        ));
    }

    #[test]
    fn optimum_gradient_vanishes() {
        let (model, frames) = two_level_quadratic(TwoLevelParams::new(4, 3, 5, 42));
        let state = quadratic_global_optimum(&model, &frames).unwrap();
        for &n in model.graph().topo_order() {
            assert!(
                model.grad_partial(&frames, &state.values, n).norm() < 1e-10,
                "node {n}"
            );
        }
    }

    #[test]
    fn identity_model_is_ridge_regression() {
        // G1 = I, G2 = 0, beta = gamma = 1: maximizing
        // -1/2||x - y1||^2 - 1/2||y1||^2 gives y1 = x / 2, y2 = 0.
        let mut params = TwoLevelParams::new(3, 2, 3, 43);
        params.beta = 1.0;
        params.gamma = 1.0;
        let (model, frames) = two_level_quadratic(params);
        let model = model.with_system(
            DMatrix::identity(3, 3),
            DMatrix::zeros(3, 2),
        );
        let state = quadratic_global_optimum(&model, &frames).unwrap();
        let x = frames.frame(NodeId(1));
        assert!((state.values.get(NodeId(1)) - x / 2.0).norm() < 1e-12);
        assert!(state.values.get(NodeId(2)).norm() < 1e-12);
    }
}
