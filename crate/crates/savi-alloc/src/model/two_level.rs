//! 2-level quadratic latent model with a closed-form global optimum.
//!
//! L(y1, y2) = -1/2 ||x - G1 y1||^2 - beta/2 ||y1 - G2 y2||^2 - gamma/2 ||y2||^2
//!
//! Mapped onto the rate/distortion split as R_1 = 0, D_1 = (x - G1 y1)^2 with
//! lambda0 = 1/2, R_2 = beta/2 ||y1 - G2 y2||^2 + gamma/2 ||y2||^2, D_2 = 0.
//! The objective is a strictly concave quadratic, so the global optimum falls
//! out of one linear solve and serves as ground truth for the SAVI variants.

use nalgebra::{DMatrix, DVector};

use crate::graph::{LatentGraph, NodeId};

use super::gop::seeded_stream;
use super::{FrameData, LatentValues, Model, ObjectiveBreakdown};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TwoLevelParams {
    pub d1: usize,
    pub d2: usize,
    pub pixel_count: usize,
    pub beta: f64,
    pub gamma: f64,
    /// Relative size of the perturbation applied to the FAVI matrices so the
    /// initialization is good but not exactly optimal.
    pub favi_noise: f64,
    pub seed: u64,
}

impl TwoLevelParams {
    pub fn new(d1: usize, d2: usize, pixel_count: usize, seed: u64) -> Self {
        Self {
            d1,
            d2,
            pixel_count,
            beta: 1.0,
            gamma: 1.0,
            favi_noise: 0.25,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoLevelQuadratic {
    graph: LatentGraph,
    params: TwoLevelParams,
    lambda0: DVector<f64>,
    g1: DMatrix<f64>,
    g2: DMatrix<f64>,
    h1: DMatrix<f64>,
    h2: DMatrix<f64>,
}

fn standard_normal_matrix(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    use rand::Rng;
    DMatrix::from_fn(rows, cols, |_, _| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Builds the model and one observed frame from the seed.
pub fn two_level_quadratic(params: TwoLevelParams) -> (TwoLevelQuadratic, FrameData) {
    assert!(params.d1 > 0 && params.d2 > 0 && params.pixel_count > 0);
    assert!(params.beta > 0.0 && params.gamma > 0.0);
    let mut rng = seeded_stream(params.seed, 10);
    let m = params.pixel_count;
    let g1 = standard_normal_matrix(&mut rng, m, params.d1) / (params.d1 as f64).sqrt();
    let g2 = standard_normal_matrix(&mut rng, params.d1, params.d2) / (params.d2 as f64).sqrt();

    // FAVI matrices: conditional optimizers plus a seeded perturbation.
    // y2 | y1: argmax is (beta G2^T G2 + gamma I)^-1 beta G2^T y1.
    let a2 = &g2.transpose() * &g2 * params.beta
        + DMatrix::from_diagonal(&DVector::from_element(params.d2, params.gamma));
    let h2_star = a2
        .lu()
        .solve(&(g2.transpose() * params.beta))
        .expect("beta G2^T G2 + gamma I is positive definite");
    // y1 | x with y2 at its conditional response: ridge encoder.
    let a1 = &g1.transpose() * &g1
        + DMatrix::from_diagonal(&DVector::from_element(params.d1, params.beta));
    let h1_star = a1
        .lu()
        .solve(&g1.transpose())
        .expect("G1^T G1 + beta I is positive definite");

    let n1 = standard_normal_matrix(&mut rng, params.d1, m);
    let n2 = standard_normal_matrix(&mut rng, params.d2, params.d1);
    let s1 = params.favi_noise * h1_star.norm() / n1.norm().max(1e-12);
    let s2 = params.favi_noise * h2_star.norm() / n2.norm().max(1e-12);
    let h1 = &h1_star + n1 * s1;
    let h2 = &h2_star + n2 * s2;

    let x = standard_normal_matrix(&mut rng, m, 1).column(0).into_owned();
    let frames = FrameData::new(vec![x, DVector::zeros(0)]);

    let graph = LatentGraph::build(&[params.d1, params.d2], &[(1, 2)]).expect("chain");
    let lambda0 = DVector::from_element(m, 0.5);
    (
        TwoLevelQuadratic {
            graph,
            params,
            lambda0,
            g1,
            g2,
            h1,
            h2,
        },
        frames,
    )
}

impl TwoLevelQuadratic {
    pub fn params(&self) -> &TwoLevelParams {
        &self.params
    }

    pub fn g1(&self) -> &DMatrix<f64> {
        &self.g1
    }

    pub fn g2(&self) -> &DMatrix<f64> {
        &self.g2
    }

    /// Overrides the generative matrices (tests construct special cases).
    pub fn with_system(mut self, g1: DMatrix<f64>, g2: DMatrix<f64>) -> Self {
        self.g1 = g1;
        self.g2 = g2;
        self
    }

    /// Overrides the FAVI matrices (tests tune initialization quality).
    pub fn with_favi(mut self, h1: DMatrix<f64>, h2: DMatrix<f64>) -> Self {
        self.h1 = h1;
        self.h2 = h2;
        self
    }

    fn y1_residual(&self, frames: &FrameData, values: &LatentValues) -> DVector<f64> {
        frames.frame(NodeId(1)) - &self.g1 * values.get(NodeId(1))
    }

    fn y2_residual(&self, values: &LatentValues) -> DVector<f64> {
        values.get(NodeId(1)) - &self.g2 * values.get(NodeId(2))
    }
}

impl Model for TwoLevelQuadratic {
    fn graph(&self) -> &LatentGraph {
        &self.graph
    }

    fn lambda0(&self) -> &DVector<f64> {
        &self.lambda0
    }

    fn favi_init(&self, frames: &FrameData, values: &LatentValues, i: NodeId) -> DVector<f64> {
        match i.0 {
            1 => &self.h1 * frames.frame(NodeId(1)),
            2 => &self.h2 * values.get(NodeId(1)),
            _ => unreachable!("two-level model has nodes 1 and 2"),
        }
    }

    fn favi_jacobian(
        &self,
        _frames: &FrameData,
        _values: &LatentValues,
        child: NodeId,
        parent: NodeId,
    ) -> DMatrix<f64> {
        debug_assert_eq!((child, parent), (NodeId(2), NodeId(1)));
        self.h2.clone()
    }

    fn objective(&self, frames: &FrameData, values: &LatentValues) -> ObjectiveBreakdown {
        let e = self.y1_residual(frames, values);
        let d1 = e.component_mul(&e);
        let r2 = 0.5 * self.params.beta * self.y2_residual(values).norm_squared()
            + 0.5 * self.params.gamma * values.get(NodeId(2)).norm_squared();
        let l1 = -self.lambda0.dot(&d1);
        let l2 = -r2;
        ObjectiveBreakdown {
            rates: vec![0.0, r2],
            distortions: vec![d1, DVector::zeros(self.params.pixel_count)],
            frame_objectives: vec![l1, l2],
            total: l1 + l2,
        }
    }

    fn grad_partial(&self, frames: &FrameData, values: &LatentValues, i: NodeId) -> DVector<f64> {
        let w = self.y2_residual(values);
        match i.0 {
            1 => self.g1.transpose() * self.y1_residual(frames, values) - w * self.params.beta,
            2 => {
                self.g2.transpose() * w * self.params.beta
                    - values.get(NodeId(2)) * self.params.gamma
            }
            _ => unreachable!(),
        }
    }

    fn frame_grad_partial(
        &self,
        frames: &FrameData,
        values: &LatentValues,
        frame: NodeId,
        wrt: NodeId,
    ) -> DVector<f64> {
        match (frame.0, wrt.0) {
            (1, 1) => self.g1.transpose() * self.y1_residual(frames, values),
            (2, 1) => -self.y2_residual(values) * self.params.beta,
            (2, 2) => {
                self.g2.transpose() * self.y2_residual(values) * self.params.beta
                    - values.get(NodeId(2)) * self.params.gamma
            }
            (1, 2) => DVector::zeros(self.params.d2),
            _ => unreachable!(),
        }
    }

    fn hessian_block(
        &self,
        _frames: &FrameData,
        _values: &LatentValues,
        i: NodeId,
        j: NodeId,
    ) -> DMatrix<f64> {
        let b = self.params.beta;
        match (i.0, j.0) {
            (1, 1) => {
                -(self.g1.transpose() * &self.g1)
                    - DMatrix::from_diagonal(&DVector::from_element(self.params.d1, b))
            }
            (1, 2) => &self.g2 * b,
            (2, 1) => self.g2.transpose() * b,
            (2, 2) => {
                -(self.g2.transpose() * &self.g2 * b)
                    - DMatrix::from_diagonal(&DVector::from_element(self.params.d2, self.params.gamma))
            }
            _ => unreachable!(),
        }
    }
}
