//! Bit allocation: inter-frame dependency matrices, the equivalent
//! allocation map lambda', the lambda-domain baseline, per-frame encoding
//! under explicit lambda maps, exhaustive lambda search, and the OEU-analog
//! encoder-finetuning baseline.

use nalgebra::{DMatrix, DVector};

use crate::graph::NodeId;
use crate::model::{FrameData, GopModel, LatentValues, Model};
use crate::savi::SaviError;

/// Reciprocal-Jacobian denominators below this magnitude are degenerate.
pub const EPS_DEN: f64 = 1e-8;

/// Guard on the dependency computation: pixel dim times latent dim.
pub const DEP_GUARD: usize = 64;

/// Guards on the exhaustive lambda search.
pub const BRUTE_FORCE_MAX_FRAMES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum AllocError {
    #[error("degenerate denominator gradient at frame {frame}: entries {entries:?} below {EPS_DEN:e}")]
    DegenerateGradient {
        frame: NodeId,
        /// (row, col) indices of the offending Jacobian entries; rate-gradient
        /// entries are reported with col = 0.
        entries: Vec<(usize, usize)>,
    },
    #[error("non-positive lambda' entries at frames {frames:?}")]
    NonPositiveLambda {
        frames: Vec<NodeId>,
        /// The full map is kept for inspection.
        map: Box<LambdaMap>,
    },
    #[error("{what} = {got} exceeds guard {cap}")]
    GuardExceeded {
        what: &'static str,
        got: usize,
        cap: usize,
    },
    #[error(transparent)]
    Divergence(#[from] SaviError),
}

/// Per-frame per-pixel multipliers lambda_i, i = 1..N.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaMap {
    lambdas: Vec<DVector<f64>>,
}

impl LambdaMap {
    pub fn new(lambdas: Vec<DVector<f64>>) -> Self {
        Self { lambdas }
    }

    /// lambda_i = lambda0 for every frame.
    pub fn uniform(model: &GopModel) -> Self {
        let n = model.graph().topo_order().len();
        Self {
            lambdas: vec![model.lambda0().clone(); n],
        }
    }

    pub fn get(&self, i: NodeId) -> &DVector<f64> {
        &self.lambdas[i.0 - 1]
    }

    pub fn set(&mut self, i: NodeId, lambda: DVector<f64>) {
        self.lambdas[i.0 - 1] = lambda;
    }

    pub fn frames(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_positive(&self) -> bool {
        self.lambdas.iter().all(|l| l.iter().all(|&x| x > 0.0))
    }

    /// Frames with at least one non-positive entry.
    pub fn non_positive_frames(&self) -> Vec<NodeId> {
        (0..self.lambdas.len())
            .filter(|&i| self.lambdas[i].iter().any(|&x| x <= 0.0))
            .map(|i| NodeId(i + 1))
            .collect()
    }
}

/// Per-frame positive scalars omega_i of the lambda-domain model.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaSchedule {
    omegas: Vec<f64>,
}

impl OmegaSchedule {
    pub fn new(omegas: Vec<f64>) -> Self {
        assert!(
            omegas.iter().all(|&w| w > 0.0),
            "omega entries must be positive"
        );
        Self { omegas }
    }

    pub fn constant(n: usize, omega: f64) -> Self {
        Self::new(vec![omega; n])
    }

    pub fn get(&self, i: NodeId) -> f64 {
        self.omegas[i.0 - 1]
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }
}

/// Inter-frame dependencies dR_j/dR_i and dD_j/dD_i of one source frame i.
#[derive(Debug, Clone)]
pub struct DependencyMatrices {
    pub frame: NodeId,
    /// (j, dR_j/dR_i) for every j after i in topological order.
    pub rate_dep: Vec<(NodeId, f64)>,
    /// (j, dD_j/dD_i), each an m x m matrix.
    pub quality_dep: Vec<(NodeId, DMatrix<f64>)>,
}

impl DependencyMatrices {
    pub fn rate_sum(&self) -> f64 {
        self.rate_dep.iter().map(|(_, r)| r).sum()
    }

    pub fn quality_sum(&self, m: usize) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(m, m);
        for (_, q) in &self.quality_dep {
            s += q;
        }
        s
    }
}

/// Elementwise reciprocal with the degeneracy guard; `clamp` substitutes
/// sign(x) * EPS_DEN for degenerate denominators instead of failing.
fn reciprocal_guarded(
    frame: NodeId,
    j: &DMatrix<f64>,
    col_offset_is_rate: bool,
    clamp: bool,
) -> Result<DMatrix<f64>, AllocError> {
    let mut bad = Vec::new();
    let out = DMatrix::from_fn(j.nrows(), j.ncols(), |r, c| {
        let x = j[(r, c)];
        if x.abs() < EPS_DEN {
            if clamp {
                let s = if x < 0.0 { -1.0 } else { 1.0 };
                1.0 / (s * EPS_DEN)
            } else {
                bad.push(if col_offset_is_rate { (r, 0) } else { (r, c) });
                0.0
            }
        } else {
            1.0 / x
        }
    });
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(AllocError::DegenerateGradient {
            frame,
            entries: bad,
        })
    }
}

/// Forward sensitivities dy_k/dy_i for k at or after i, with every later node
/// treated as a FAVI function of its parents (evaluated at `values`).
fn favi_sensitivities(
    model: &GopModel,
    frames: &FrameData,
    values: &LatentValues,
    i: NodeId,
) -> Vec<Option<DMatrix<f64>>> {
    let graph = model.graph();
    let d = model.latent_dim();
    let mut sens: Vec<Option<DMatrix<f64>>> = vec![None; graph.node_count()];
    sens[i.0] = Some(DMatrix::identity(d, d));
    let pos_i = graph.topo_position(i);
    for &k in graph.topo_order() {
        if graph.topo_position(k) <= pos_i {
            continue;
        }
        let mut s_k: Option<DMatrix<f64>> = None;
        for &p in graph.parents(k) {
            if let Some(s_p) = &sens[p.0] {
                let jac = model.favi_jacobian(frames, values, k, p);
                let term = jac * s_p;
                s_k = Some(match s_k {
                    None => term,
                    Some(acc) => acc + term,
                });
            }
        }
        sens[k.0] = s_k;
    }
    sens
}

/// Total derivative dR_j/dy_i (row) and dD_j/dy_i (m x d) through the FAVI
/// chain sensitivities.
fn chained_frame_derivatives(
    model: &GopModel,
    frames: &FrameData,
    values: &LatentValues,
    sens: &[Option<DMatrix<f64>>],
    j: NodeId,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let graph = model.graph();
    let d = model.latent_dim();
    let m = model.pixel_count();
    let mut dr = DMatrix::zeros(1, d);
    let mut dd = DMatrix::zeros(m, d);
    let mut args = vec![j];
    args.extend_from_slice(graph.parents(j));
    for a in args {
        if let Some(s_a) = &sens[a.0] {
            dr += model.rate_grad(values, j, a).transpose() * s_a;
            dd += model.distortion_jacobian(frames, values, j, a) * s_a;
        }
    }
    (dr, dd)
}

fn dependency_matrices_impl(
    model: &GopModel,
    frames: &FrameData,
    values: &LatentValues,
    i: NodeId,
    clamp: bool,
) -> Result<DependencyMatrices, AllocError> {
    let d = model.latent_dim();
    let m = model.pixel_count();
    if m * d > DEP_GUARD {
        return Err(AllocError::GuardExceeded {
            what: "pixel_count * latent_dim",
            got: m * d,
            cap: DEP_GUARD,
        });
    }
    let graph = model.graph();
    let sens = favi_sensitivities(model, frames, values, i);

    // Denominators of Eq. 16 at frame i itself.
    let dr_i = model.rate_grad(values, i, i);
    let dd_i = model.distortion_jacobian(frames, values, i, i);
    let dy_dr =
        reciprocal_guarded(i, &DMatrix::from_column_slice(d, 1, dr_i.as_slice()), true, clamp)?;
    let dy_dd = reciprocal_guarded(i, &dd_i.transpose(), false, clamp)?;

    let pos_i = graph.topo_position(i);
    let mut rate_dep = Vec::new();
    let mut quality_dep = Vec::new();
    for &j in graph.topo_order() {
        if graph.topo_position(j) <= pos_i {
            continue;
        }
        let (dr_j, dd_j) = chained_frame_derivatives(model, frames, values, &sens, j);
        rate_dep.push((j, (&dr_j * &dy_dr)[(0, 0)]));
        quality_dep.push((j, &dd_j * &dy_dd));
    }
    Ok(DependencyMatrices {
        frame: i,
        rate_dep,
        quality_dep,
    })
}

/// Inter-frame dependency of every later frame on frame i, per Eq. 15 with
/// the reciprocal-Jacobian inverses of Eq. 16. Degenerate denominators are
/// an error: a clamped map silently breaks the equivalence theorem.
pub fn dependency_matrices(
    model: &GopModel,
    frames: &FrameData,
    values: &LatentValues,
    i: NodeId,
) -> Result<DependencyMatrices, AllocError> {
    dependency_matrices_impl(model, frames, values, i, false)
}

/// Exploratory variant: degenerate denominators clamped to sign * EPS_DEN.
pub fn clamped_dependency_matrices(
    model: &GopModel,
    frames: &FrameData,
    values: &LatentValues,
    i: NodeId,
) -> Result<DependencyMatrices, AllocError> {
    dependency_matrices_impl(model, frames, values, i, true)
}

/// The closed form of the equivalence theorem given the dependency sums:
/// lambda'_i = (I + sum dD_j/dD_i)^T lambda0 / (1 + sum dR_j/dR_i).
pub fn equivalent_lambda_from_sums(
    lambda0: &DVector<f64>,
    quality_sum: &DMatrix<f64>,
    rate_sum: f64,
) -> DVector<f64> {
    let m = lambda0.len();
    let num = (DMatrix::identity(m, m) + quality_sum).transpose() * lambda0;
    num / (1.0 + rate_sum)
}

/// Equivalent bit-allocation map lambda' evaluated at `values`.
pub fn equivalent_lambda_map(
    model: &GopModel,
    frames: &FrameData,
    values: &LatentValues,
) -> Result<LambdaMap, AllocError> {
    let m = model.pixel_count();
    let mut lambdas = Vec::new();
    for &i in model.graph().topo_order() {
        let dep = dependency_matrices(model, frames, values, i)?;
        lambdas.push(equivalent_lambda_from_sums(
            model.lambda0(),
            &dep.quality_sum(m),
            dep.rate_sum(),
        ));
    }
    let map = LambdaMap::new(lambdas);
    let bad = map.non_positive_frames();
    if bad.is_empty() {
        Ok(map)
    } else {
        Err(AllocError::NonPositiveLambda {
            frames: bad,
            map: Box::new(map),
        })
    }
}

/// Converged per-frame results and the GoP-level cost under lambda0.
#[derive(Debug, Clone)]
pub struct AllocationReport {
    pub lambda_map: LambdaMap,
    /// R_i* per frame.
    pub rates: Vec<f64>,
    /// D_i* per frame (per-pixel).
    pub distortions: Vec<DVector<f64>>,
    /// sum R_i* + lambda0^T sum D_i*.
    pub gop_cost: f64,
    /// One entry per frame i with its successors' dependencies.
    pub dependency: Vec<DependencyMatrices>,
    /// Latents the report was evaluated at.
    pub values: LatentValues,
}

impl AllocationReport {
    pub fn to_json(&self) -> serde_json::Value {
        let lambda: Vec<Vec<f64>> = (0..self.lambda_map.frames())
            .map(|i| self.lambda_map.get(NodeId(i + 1)).iter().copied().collect())
            .collect();
        let distortion: Vec<Vec<f64>> = self
            .distortions
            .iter()
            .map(|d| d.iter().copied().collect())
            .collect();
        let dependency: Vec<serde_json::Value> = self
            .dependency
            .iter()
            .flat_map(|dep| {
                dep.rate_dep
                    .iter()
                    .zip(&dep.quality_dep)
                    .map(move |((j, r), (_, q))| {
                        serde_json::json!({
                            "from": dep.frame.0,
                            "to": j.0,
                            "rate": r,
                            // row-major m x m
                            "quality": q.row_iter()
                                .flat_map(|row| row.iter().copied().collect::<Vec<_>>())
                                .collect::<Vec<f64>>(),
                        })
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        serde_json::json!({
            "lambda": lambda,
            "rate": self.rates,
            "distortion": distortion,
            "gop_cost": self.gop_cost,
            "dependency": dependency,
        })
    }
}

/// Evaluates a report at the given latents: per-frame R/D, gop cost, and the
/// dependency matrices at that state.
pub fn report_at(
    model: &GopModel,
    frames: &FrameData,
    values: &LatentValues,
    lambda_map: LambdaMap,
) -> Result<AllocationReport, AllocError> {
    let breakdown = model.objective(frames, values);
    let mut dependency = Vec::new();
    for &i in model.graph().topo_order() {
        dependency.push(dependency_matrices(model, frames, values, i)?);
    }
    let gop_cost = breakdown.gop_cost();
    Ok(AllocationReport {
        lambda_map,
        rates: breakdown.rates,
        distortions: breakdown.distortions,
        gop_cost,
        dependency,
        values: values.clone(),
    })
}

/// Per-frame cost gradient d(R_i + lambda_i^T D_i)/dy_i with parents frozen.
fn frame_cost_grad(
    model: &GopModel,
    frames: &FrameData,
    values: &LatentValues,
    i: NodeId,
    lambda: &DVector<f64>,
) -> DVector<f64> {
    model.rate_grad(values, i, i)
        + model.distortion_jacobian(frames, values, i, i).transpose() * lambda
}

/// Sequential per-frame encoding: frame i is initialized by FAVI from its
/// already-encoded parents and descends R_i + lambda_i^T D_i for
/// `inner_steps` steps, then freezes.
pub fn encode_with_lambda(
    model: &GopModel,
    frames: &FrameData,
    lambda_map: &LambdaMap,
    inner_steps: usize,
    alpha: f64,
) -> Result<AllocationReport, AllocError> {
    assert!(lambda_map.is_positive(), "lambda map must be positive");
    let mut values = LatentValues::zeros(model.graph());
    for &i in model.graph().topo_order() {
        let y0 = model.favi_init(frames, &values, i);
        values.set(i, y0);
        for k in 0..inner_steps {
            let g = frame_cost_grad(model, frames, &values, i, lambda_map.get(i));
            let y = values.get(i) - g * alpha;
            values.set(i, y);
            if values.get(i).iter().any(|x| !x.is_finite()) {
                return Err(AllocError::Divergence(SaviError::DivergenceDetected {
                    node: i,
                    step: k + 1,
                    state: Box::new(values.clone()),
                }));
            }
        }
    }
    report_at(model, frames, &values, lambda_map.clone())
}

/// Lambda-domain baseline: lambda_i = omega_i * lambda0, then encode.
pub fn lambda_domain_allocate(
    model: &GopModel,
    frames: &FrameData,
    omega: &OmegaSchedule,
    inner_steps: usize,
    alpha: f64,
) -> Result<AllocationReport, AllocError> {
    let lambdas = model
        .graph()
        .topo_order()
        .iter()
        .map(|&i| model.lambda0() * omega.get(i))
        .collect();
    encode_with_lambda(model, frames, &LambdaMap::new(lambdas), inner_steps, alpha)
}

/// Per-frame scalar lambda grid for the exhaustive search, as multiples of
/// lambda0 (pixel_count must be 1).
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub inner_steps: usize,
    pub learning_rate: f64,
}

impl GridSpec {
    pub fn factors(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.lo];
        }
        (0..self.points)
            .map(|k| self.lo + (self.hi - self.lo) * k as f64 / (self.points - 1) as f64)
            .collect()
    }
}

/// Exhaustive search over per-frame lambda grids; ties broken by
/// lexicographic grid index (first winner kept).
pub fn brute_force_optimal_lambda(
    model: &GopModel,
    frames: &FrameData,
    grid: &GridSpec,
) -> Result<AllocationReport, AllocError> {
    let n = model.graph().topo_order().len();
    if n > BRUTE_FORCE_MAX_FRAMES {
        return Err(AllocError::GuardExceeded {
            what: "frame count",
            got: n,
            cap: BRUTE_FORCE_MAX_FRAMES,
        });
    }
    if model.pixel_count() != 1 {
        return Err(AllocError::GuardExceeded {
            what: "pixel count",
            got: model.pixel_count(),
            cap: 1,
        });
    }
    let factors = grid.factors();
    let mut best: Option<AllocationReport> = None;
    let mut index = vec![0usize; n];
    loop {
        let lambdas: Vec<DVector<f64>> = index
            .iter()
            .map(|&k| model.lambda0() * factors[k])
            .collect();
        let map = LambdaMap::new(lambdas);
        if map.is_positive() {
            let report =
                encode_with_lambda(model, frames, &map, grid.inner_steps, grid.learning_rate)?;
            let better = match &best {
                None => true,
                Some(b) => report.gop_cost < b.gop_cost,
            };
            if better {
                best = Some(report);
            }
        }
        // Advance the lexicographic counter.
        let mut carry = n;
        while carry > 0 {
            index[carry - 1] += 1;
            if index[carry - 1] < factors.len() {
                break;
            }
            index[carry - 1] = 0;
            carry -= 1;
        }
        if carry == 0 {
            break;
        }
    }
    best.ok_or(AllocError::GuardExceeded {
        what: "grid points",
        got: 0,
        cap: 1,
    })
}

/// OEU-analog baseline: per-frame copies of the encoder matrices (E_i, F_i)
/// ascend the GoP likelihood; latents are always produced by the updated
/// encoders, so allocation acts at frame granularity.
pub fn oeu_baseline(
    model: &GopModel,
    frames: &FrameData,
    steps: usize,
    alpha: f64,
) -> Result<AllocationReport, AllocError> {
    let graph = model.graph();
    let order = graph.topo_order().to_vec();
    let n = order.len();
    let mut es: Vec<DMatrix<f64>> = vec![model.encoder_e().clone(); n];
    let mut fs: Vec<DMatrix<f64>> = vec![model.encoder_f().clone(); n];

    let forward = |es: &[DMatrix<f64>], fs: &[DMatrix<f64>]| -> LatentValues {
        let mut values = LatentValues::zeros(graph);
        for &i in &order {
            let y = model.favi_init_with(&es[i.0 - 1], &fs[i.0 - 1], frames, &values, i);
            values.set(i, y);
        }
        values
    };

    for step in 0..steps {
        let values = forward(&es, &fs);
        // Adjoints u_i = dL/dy_i through the encoder chain.
        let mut adjoint: Vec<DVector<f64>> = vec![DVector::zeros(0); n];
        for &i in order.iter().rev() {
            let mut u = model.grad_partial(frames, &values, i);
            for &c in graph.children(i) {
                let z_c =
                    model.favi_pre_activation(&es[c.0 - 1], &fs[c.0 - 1], frames, &values, c);
                let sp = model.nonlinearity().prime(&z_c);
                u += fs[c.0 - 1].transpose() * sp.component_mul(&adjoint[c.0 - 1]);
            }
            adjoint[i.0 - 1] = u;
        }
        // Ascent on the encoder matrices.
        for &i in &order {
            let z = model.favi_pre_activation(&es[i.0 - 1], &fs[i.0 - 1], frames, &values, i);
            let dz = model
                .nonlinearity()
                .prime(&z)
                .component_mul(&adjoint[i.0 - 1]);
            let mut psum = DVector::zeros(model.latent_dim());
            for &p in graph.parents(i) {
                psum += values.get(p);
            }
            es[i.0 - 1] += &dz * frames.frame(i).transpose() * alpha;
            fs[i.0 - 1] += &dz * psum.transpose() * alpha;
            if es[i.0 - 1].iter().any(|x| !x.is_finite())
                || fs[i.0 - 1].iter().any(|x| !x.is_finite())
            {
                return Err(AllocError::Divergence(SaviError::DivergenceDetected {
                    node: i,
                    step: step + 1,
                    state: Box::new(values.clone()),
                }));
            }
        }
    }
    let values = forward(&es, &fs);
    report_at(model, frames, &values, LambdaMap::uniform(model))
}

/// A decoupled sibling of `model`: A = U = F = 0, so frames share nothing.
pub fn decoupled(model: &GopModel) -> GopModel {
    let d = model.latent_dim();
    let m = model.pixel_count();
    model.clone().with_matrices(
        DMatrix::zeros(d, d),
        model.decoder_w().clone(),
        DMatrix::zeros(m, d),
        model.encoder_e().clone(),
        DMatrix::zeros(d, d),
    )
}
