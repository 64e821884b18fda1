//! Analytic GoP codec surrogate.
//!
//! Frame i carries a latent y_i conditioned on its graph parents. Rate is the
//! squared deviation from the prior mean `A * sum(parents)`, distortion is
//! per-pixel squared reconstruction error through the decoder pair (W, U),
//! and FAVI runs the encoder pair (E, F) over the graph. A `tanh` mode makes
//! the decoder and encoder nonlinear; in linear mode the GoP objective is a
//! concave quadratic in the stacked latents.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{LatentGraph, NodeId};

use super::{FrameData, LatentValues, Model, ModelError, ObjectiveBreakdown};

/// Activation used by both the decoder and the FAVI encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Linear,
    Tanh,
}

impl Nonlinearity {
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Nonlinearity::Linear => v.clone(),
            Nonlinearity::Tanh => v.map(f64::tanh),
        }
    }

    /// Elementwise first derivative evaluated at `v`.
    pub fn prime(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Nonlinearity::Linear => DVector::from_element(v.len(), 1.0),
            Nonlinearity::Tanh => v.map(|x| 1.0 - x.tanh() * x.tanh()),
        }
    }

    /// Elementwise second derivative evaluated at `v`.
    pub fn second(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Nonlinearity::Linear => DVector::zeros(v.len()),
            Nonlinearity::Tanh => v.map(|x| {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }),
        }
    }
}

/// Construction parameters; matrices are drawn from the seed.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GopModelSpec {
    pub frame_count: usize,
    pub latent_dim: usize,
    pub pixel_count: usize,
    /// Scalar lambda0, broadcast to the per-pixel vector.
    pub lambda0: f64,
    /// Temporal correlation of the synthetic frames, in [0, 1).
    pub temporal_correlation: f64,
    pub seed: u64,
    pub nonlinearity: Nonlinearity,
    /// Spectral norm the prior transition A is rescaled to (must be < 1).
    pub prior_radius: f64,
}

impl GopModelSpec {
    pub fn new(frame_count: usize, latent_dim: usize, pixel_count: usize, seed: u64) -> Self {
        Self {
            frame_count,
            latent_dim,
            pixel_count,
            lambda0: 1.0,
            temporal_correlation: 0.7,
            seed,
            nonlinearity: Nonlinearity::Linear,
            prior_radius: 0.8,
        }
    }

    pub fn with_nonlinearity(mut self, n: Nonlinearity) -> Self {
        self.nonlinearity = n;
        self
    }

    pub fn with_prior_radius(mut self, r: f64) -> Self {
        self.prior_radius = r;
        self
    }

    pub fn with_lambda0(mut self, l: f64) -> Self {
        self.lambda0 = l;
        self
    }

    pub fn with_correlation(mut self, rho: f64) -> Self {
        self.temporal_correlation = rho;
        self
    }
}

/// Seeded RNG stream; stream ids separate matrix, frame and test draws.
pub(crate) fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, one value per call.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| standard_normal(rng))
}

/// Spectral-radius estimate: Gelfand's formula ||A^k||^(1/k) with k = 64,
/// computed by repeated squaring with per-step normalization.
fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let mut q = a.clone();
    let mut acc = 1.0f64;
    let mut denom = 1.0f64;
    for _ in 0..6 {
        let n = q.norm();
        if n == 0.0 {
            return 0.0;
        }
        acc *= n.powf(1.0 / denom);
        q = (&q / n) * (&q / n);
        denom *= 2.0;
    }
    acc * q.norm().powf(1.0 / denom)
}

fn rescale_to_norm(m: DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let s = spectral_norm(&m);
    if s == 0.0 {
        m
    } else {
        m * (target / s)
    }
}

/// Largest singular value via power iteration on A^T A.
fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 || a.nrows() == 0 {
        return 0.0;
    }
    let ata = a.transpose() * a;
    let mut v = DVector::from_element(a.ncols(), 1.0 / (a.ncols() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = &ata * &v;
        let n = w.norm();
        if n == 0.0 {
            return 0.0;
        }
        v = w / n;
        lambda = n;
    }
    lambda.sqrt()
}

/// Chain/diamond codec surrogate with analytic derivatives.
#[derive(Debug, Clone)]
pub struct GopModel {
    graph: LatentGraph,
    spec: GopModelSpec,
    lambda0: DVector<f64>,
    a: DMatrix<f64>,
    w: DMatrix<f64>,
    u: DMatrix<f64>,
    e: DMatrix<f64>,
    f: DMatrix<f64>,
}

impl GopModel {
    /// Builds the model over `graph` with matrices drawn from the spec seed,
    /// A rescaled to `prior_radius` and W, U, E, F to unit spectral norm.
    pub fn from_spec(spec: GopModelSpec, graph: LatentGraph) -> Self {
        assert_eq!(
            graph.real_count(),
            spec.frame_count,
            "graph size must match frame_count"
        );
        assert!(spec.lambda0 > 0.0, "lambda0 entries must be positive");
        let d = spec.latent_dim;
        let m = spec.pixel_count;
        let mut rng = seeded_stream(spec.seed, 0);
        let a = rescale_to_norm(random_matrix(&mut rng, d, d), spec.prior_radius);
        let w = rescale_to_norm(random_matrix(&mut rng, m, d), 1.0);
        let u = rescale_to_norm(random_matrix(&mut rng, m, d), 1.0);
        let e = rescale_to_norm(random_matrix(&mut rng, d, m), 1.0);
        let f = rescale_to_norm(random_matrix(&mut rng, d, d), 1.0);
        assert!(
            spectral_radius(&a) < 1.0,
            "prior transition spectral radius must stay below 1"
        );
        let lambda0 = DVector::from_element(m, spec.lambda0);
        Self {
            graph,
            spec,
            lambda0,
            a,
            w,
            u,
            e,
            f,
        }
    }

    /// Chain model over `frame_count` frames.
    pub fn chain(spec: GopModelSpec) -> Self {
        let graph = LatentGraph::chain(spec.frame_count, spec.latent_dim);
        Self::from_spec(spec, graph)
    }

    /// Diamond model 1 -> {2, 3} -> 4 (frame_count must be 4).
    pub fn diamond(spec: GopModelSpec) -> Self {
        let graph = LatentGraph::diamond(spec.latent_dim);
        Self::from_spec(spec, graph)
    }

    /// Replaces the parameter matrices; used by tests and decoupled setups.
    pub fn with_matrices(
        mut self,
        a: DMatrix<f64>,
        w: DMatrix<f64>,
        u: DMatrix<f64>,
        e: DMatrix<f64>,
        f: DMatrix<f64>,
    ) -> Self {
        self.a = a;
        self.w = w;
        self.u = u;
        self.e = e;
        self.f = f;
        self
    }

    /// Rescales every cross-frame coupling (A, U, F) to the given spectral
    /// norm; used to sweep how strongly frames depend on their references.
    pub fn with_coupling_strength(mut self, radius: f64) -> Self {
        self.a = rescale_to_norm(self.a.clone(), radius);
        self.u = rescale_to_norm(self.u.clone(), radius);
        self.f = rescale_to_norm(self.f.clone(), radius);
        self.spec.prior_radius = radius;
        self
    }

    pub fn spec(&self) -> &GopModelSpec {
        &self.spec
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.spec.nonlinearity
    }

    pub fn pixel_count(&self) -> usize {
        self.spec.pixel_count
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn prior_transition(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn decoder_w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn decoder_u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn encoder_e(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn encoder_f(&self) -> &DMatrix<f64> {
        &self.f
    }

    /// First-order autoregressive synthetic frames; deterministic per seed.
    pub fn generate_frames(&self) -> FrameData {
        generate_frames_impl(&self.spec)
    }

    fn parent_sum(&self, values: &LatentValues, i: NodeId) -> DVector<f64> {
        let mut s = DVector::zeros(self.spec.latent_dim);
        for &p in self.graph.parents(i) {
            s += values.get(p);
        }
        s
    }

    /// Prior residual y_i - A * sum(parents).
    fn residual(&self, values: &LatentValues, i: NodeId) -> DVector<f64> {
        values.get(i) - &self.a * self.parent_sum(values, i)
    }

    /// Reconstruction error x_i - (W s(y_i) + sum_p U s(y_p)).
    fn recon_error(&self, frames: &FrameData, values: &LatentValues, i: NodeId) -> DVector<f64> {
        let s = self.spec.nonlinearity;
        let mut xhat = &self.w * s.apply(values.get(i));
        for &p in self.graph.parents(i) {
            xhat += &self.u * s.apply(values.get(p));
        }
        frames.frame(i) - xhat
    }

    /// Rate of frame i given explicit latent and parent values.
    pub fn rate(
        &self,
        y_i: &DVector<f64>,
        parent_values: &[&DVector<f64>],
    ) -> Result<f64, ModelError> {
        let d = self.spec.latent_dim;
        if y_i.len() != d {
            return Err(ModelError::DimensionMismatch {
                context: "rate latent",
                expected: d,
                got: y_i.len(),
            });
        }
        let mut mean = DVector::zeros(d);
        for p in parent_values {
            if p.len() != d {
                return Err(ModelError::DimensionMismatch {
                    context: "rate parent",
                    expected: d,
                    got: p.len(),
                });
            }
            mean += &self.a * *p;
        }
        Ok(0.5 * (y_i - mean).norm_squared())
    }

    /// Per-pixel distortion of frame i given explicit latent values.
    pub fn distortion(
        &self,
        frames: &FrameData,
        i: NodeId,
        y_i: &DVector<f64>,
        parent_values: &[&DVector<f64>],
    ) -> Result<DVector<f64>, ModelError> {
        let d = self.spec.latent_dim;
        if y_i.len() != d {
            return Err(ModelError::DimensionMismatch {
                context: "distortion latent",
                expected: d,
                got: y_i.len(),
            });
        }
        let s = self.spec.nonlinearity;
        let mut xhat = &self.w * s.apply(y_i);
        for p in parent_values {
            if p.len() != d {
                return Err(ModelError::DimensionMismatch {
                    context: "distortion parent",
                    expected: d,
                    got: p.len(),
                });
            }
            xhat += &self.u * s.apply(p);
        }
        let e = frames.frame(i) - xhat;
        Ok(e.component_mul(&e))
    }

    /// FAVI with explicit encoder matrices; returns the initialized latent.
    /// Used by the online-encoder-update baseline.
    pub fn favi_init_with(
        &self,
        e: &DMatrix<f64>,
        f: &DMatrix<f64>,
        frames: &FrameData,
        values: &LatentValues,
        i: NodeId,
    ) -> DVector<f64> {
        let z = e * frames.frame(i) + f * self.parent_sum(values, i);
        self.spec.nonlinearity.apply(&z)
    }

    /// FAVI pre-activation z_i = E x_i + F * sum(parents).
    pub fn favi_pre_activation(
        &self,
        e: &DMatrix<f64>,
        f: &DMatrix<f64>,
        frames: &FrameData,
        values: &LatentValues,
        i: NodeId,
    ) -> DVector<f64> {
        e * frames.frame(i) + f * self.parent_sum(values, i)
    }

    /// d R_j / d y_wrt as a column vector; zero unless wrt is j or a parent.
    pub fn rate_grad(&self, values: &LatentValues, j: NodeId, wrt: NodeId) -> DVector<f64> {
        let u_j = self.residual(values, j);
        if wrt == j {
            u_j
        } else if self.graph.parents(j).contains(&wrt) {
            -self.a.transpose() * u_j
        } else {
            DVector::zeros(self.spec.latent_dim)
        }
    }

    /// d D_j / d y_wrt as an m x d Jacobian; zero unless wrt is j or a parent.
    pub fn distortion_jacobian(
        &self,
        frames: &FrameData,
        values: &LatentValues,
        j: NodeId,
        wrt: NodeId,
    ) -> DMatrix<f64> {
        let m = self.spec.pixel_count;
        let d = self.spec.latent_dim;
        let s = self.spec.nonlinearity;
        let e_j = self.recon_error(frames, values, j);
        let dec = if wrt == j {
            &self.w
        } else if self.graph.parents(j).contains(&wrt) {
            &self.u
        } else {
            return DMatrix::zeros(m, d);
        };
        // D_j[k] = e_j[k]^2, de_j/dy_wrt = -Dec diag(s'(y_wrt)).
        let sp = s.prime(values.get(wrt));
        let mut out = DMatrix::zeros(m, d);
        for r in 0..m {
            for c in 0..d {
                out[(r, c)] = -2.0 * e_j[r] * dec[(r, c)] * sp[c];
            }
        }
        out
    }
}

fn generate_frames_impl(spec: &GopModelSpec) -> FrameData {
    let rho = spec.temporal_correlation;
    let m = spec.pixel_count;
    let mut rng = seeded_stream(spec.seed, 1);
    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut prev: Option<DVector<f64>> = None;
    for _ in 0..spec.frame_count {
        let eps = DVector::from_fn(m, |_, _| standard_normal(&mut rng));
        let x = match &prev {
            None => eps,
            Some(p) => p * rho + eps * (1.0 - rho * rho).sqrt(),
        };
        frames.push(x.clone());
        prev = Some(x);
    }
    FrameData::new(frames)
}

/// Standalone frame generation for a spec (same stream as the model's).
pub fn generate_frames(spec: &GopModelSpec) -> FrameData {
    generate_frames_impl(spec)
}

impl Model for GopModel {
    fn graph(&self) -> &LatentGraph {
        &self.graph
    }

    fn lambda0(&self) -> &DVector<f64> {
        &self.lambda0
    }

    fn favi_init(&self, frames: &FrameData, values: &LatentValues, i: NodeId) -> DVector<f64> {
        self.favi_init_with(&self.e, &self.f, frames, values, i)
    }

    fn favi_jacobian(
        &self,
        frames: &FrameData,
        values: &LatentValues,
        child: NodeId,
        parent: NodeId,
    ) -> DMatrix<f64> {
        debug_assert!(self.graph.parents(child).contains(&parent));
        match self.spec.nonlinearity {
            Nonlinearity::Linear => self.f.clone(),
            Nonlinearity::Tanh => {
                let z = self.favi_pre_activation(&self.e, &self.f, frames, values, child);
                let sp = z.map(|x| 1.0 - x.tanh() * x.tanh());
                DMatrix::from_fn(sp.len(), self.f.ncols(), |r, c| sp[r] * self.f[(r, c)])
            }
        }
    }

    fn objective(&self, frames: &FrameData, values: &LatentValues) -> ObjectiveBreakdown {
        let n = self.graph.real_count();
        let mut rates = Vec::with_capacity(n);
        let mut distortions = Vec::with_capacity(n);
        let mut frame_objectives = Vec::with_capacity(n);
        let mut total = 0.0;
        for idx in 1..=n {
            let i = NodeId(idx);
            let r = 0.5 * self.residual(values, i).norm_squared();
            let e = self.recon_error(frames, values, i);
            let d_vec = e.component_mul(&e);
            let l = -(r + self.lambda0.dot(&d_vec));
            total += l;
            rates.push(r);
            distortions.push(d_vec);
            frame_objectives.push(l);
        }
        ObjectiveBreakdown {
            rates,
            distortions,
            frame_objectives,
            total,
        }
    }

    fn grad_partial(&self, frames: &FrameData, values: &LatentValues, i: NodeId) -> DVector<f64> {
        let s = self.spec.nonlinearity;
        let sp_i = s.prime(values.get(i));
        // Own frame: -u_i + 2 s'(y_i) .* W^T (lambda0 .* e_i)
        let mut g = -self.residual(values, i);
        let e_i = self.recon_error(frames, values, i);
        g += (self.w.transpose() * self.lambda0.component_mul(&e_i))
            .component_mul(&sp_i)
            * 2.0;
        // Children: A^T u_c + 2 s'(y_i) .* U^T (lambda0 .* e_c)
        for &c in self.graph.children(i) {
            g += self.a.transpose() * self.residual(values, c);
            let e_c = self.recon_error(frames, values, c);
            g += (self.u.transpose() * self.lambda0.component_mul(&e_c))
                .component_mul(&sp_i)
                * 2.0;
        }
        g
    }

    fn frame_grad_partial(
        &self,
        frames: &FrameData,
        values: &LatentValues,
        frame: NodeId,
        wrt: NodeId,
    ) -> DVector<f64> {
        let s = self.spec.nonlinearity;
        if frame == wrt {
            let sp = s.prime(values.get(wrt));
            let e_f = self.recon_error(frames, values, frame);
            -self.residual(values, frame)
                + (self.w.transpose() * self.lambda0.component_mul(&e_f)).component_mul(&sp) * 2.0
        } else if self.graph.parents(frame).contains(&wrt) {
            let sp = s.prime(values.get(wrt));
            let e_f = self.recon_error(frames, values, frame);
            self.a.transpose() * self.residual(values, frame)
                + (self.u.transpose() * self.lambda0.component_mul(&e_f)).component_mul(&sp) * 2.0
        } else {
            DVector::zeros(self.spec.latent_dim)
        }
    }

    fn hessian_block(
        &self,
        frames: &FrameData,
        values: &LatentValues,
        i: NodeId,
        j: NodeId,
    ) -> DMatrix<f64> {
        let d = self.spec.latent_dim;
        let s = self.spec.nonlinearity;
        let lam = &self.lambda0;
        let scaled = |dec: &DMatrix<f64>| -> DMatrix<f64> {
            // Dec^T diag(lambda0) Dec
            let mut t = dec.clone();
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    t[(r, c)] *= lam[r];
                }
            }
            dec.transpose() * t
        };
        if i == j {
            let sp = s.prime(values.get(i));
            let ss = s.second(values.get(i));
            let e_i = self.recon_error(frames, values, i);
            let mut h = DMatrix::from_diagonal(&DVector::from_element(d, -1.0));
            let wlw = scaled(&self.w);
            for r in 0..d {
                for c in 0..d {
                    h[(r, c)] -= 2.0 * sp[r] * wlw[(r, c)] * sp[c];
                }
            }
            let curv = self.w.transpose() * lam.component_mul(&e_i);
            for r in 0..d {
                h[(r, r)] += 2.0 * ss[r] * curv[r];
            }
            let ata = self.a.transpose() * &self.a;
            let ulu = scaled(&self.u);
            for &c_node in self.graph.children(i) {
                h -= &ata;
                for r in 0..d {
                    for c in 0..d {
                        h[(r, c)] -= 2.0 * sp[r] * ulu[(r, c)] * sp[c];
                    }
                }
                let e_c = self.recon_error(frames, values, c_node);
                let curv_c = self.u.transpose() * lam.component_mul(&e_c);
                for r in 0..d {
                    h[(r, r)] += 2.0 * ss[r] * curv_c[r];
                }
            }
            h
        } else if self.graph.parents(j).contains(&i) {
            // Edge i -> j: A^T - 2 diag(s'_i) U^T diag(lambda0) W diag(s'_j),
            // plus any shared-child terms.
            let sp_i = s.prime(values.get(i));
            let sp_j = s.prime(values.get(j));
            let mut h = self.a.transpose();
            let ulw = {
                let mut t = self.w.clone();
                for r in 0..t.nrows() {
                    for c in 0..t.ncols() {
                        t[(r, c)] *= lam[r];
                    }
                }
                self.u.transpose() * t
            };
            for r in 0..d {
                for c in 0..d {
                    h[(r, c)] -= 2.0 * sp_i[r] * ulw[(r, c)] * sp_j[c];
                }
            }
            h + self.shared_child_block(values, i, j)
        } else if self.graph.parents(i).contains(&j) {
            self.hessian_block(frames, values, j, i).transpose()
        } else {
            self.shared_child_block(values, i, j)
        }
    }
}

impl GopModel {
    /// Terms from frames that have both `i` and `j` as parents.
    fn shared_child_block(&self, values: &LatentValues, i: NodeId, j: NodeId) -> DMatrix<f64> {
        let d = self.spec.latent_dim;
        let s = self.spec.nonlinearity;
        let mut h = DMatrix::zeros(d, d);
        let shared: Vec<NodeId> = self
            .graph
            .children(i)
            .iter()
            .copied()
            .filter(|c| self.graph.parents(*c).contains(&j))
            .collect();
        if shared.is_empty() {
            return h;
        }
        let sp_i = s.prime(values.get(i));
        let sp_j = s.prime(values.get(j));
        let ata = self.a.transpose() * &self.a;
        let ulu = {
            let mut t = self.u.clone();
            for r in 0..t.nrows() {
                for c in 0..t.ncols() {
                    t[(r, c)] *= self.lambda0[r];
                }
            }
            self.u.transpose() * t
        };
        for _ in &shared {
            h -= &ata;
            for r in 0..d {
                for c in 0..d {
                    h[(r, c)] -= 2.0 * sp_i[r] * ulu[(r, c)] * sp_j[c];
                }
            }
        }
        h
    }
}
