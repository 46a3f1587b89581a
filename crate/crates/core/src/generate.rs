//! Latent trajectory generation with a trained model: recursive mean prediction,
//! conditional optimization between anchors, and geodesics of the intrinsic or the
//! expected pullback metric, each decoded through the observation GP.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaxonomyGraph};
use crate::error::{Error, Result};
use crate::manifold::raw;
use crate::model::geometry::flip;
use crate::model::objective::{dynamics_term, log_det_term, Partials};
use crate::model::{DynamicsPosterior, Geometry, GpPosterior, LatentGeometry, LatentState, ModelData};
use crate::optim::{adam_step, gradient_norm, minimize, AdamConfig, AdamState, BlockGrads, BlockKind, MinimizeConfig, ParameterBlock};
use crate::stats::log_rsinh;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mean,
    Conditional,
    Geodesic,
    Pullback,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Conditional log-density of each generated step (mean prediction).
    pub step_log_densities: Vec<f64>,
    /// Conditional log-density of the whole path (conditional optimization).
    pub log_density: Option<f64>,
    /// Final regularized curve energy (pullback geodesics).
    pub energy: Option<f64>,
    /// Length of the path under the metric it was optimized for.
    pub length: Option<f64>,
    /// Best-so-far objective per iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPath {
    pub method: Method,
    pub geometry: Geometry,
    pub latents: Vec<DVector<f64>>,
    /// Decoded posterior means (centered), `M x D_y`.
    pub mean: DMatrix<f64>,
    /// Decoded predictive variances, `M x D_y`.
    pub variance: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

impl GeneratedPath {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Average decoded variance over points and output dimensions.
    pub fn mean_variance(&self) -> f64 {
        self.variance.mean()
    }

    /// One row per point: step, ambient and Poincaré coordinates, decoded mean (shifted by
    /// `offset` when given) and variance.
    pub fn to_csv(&self, offset: Option<&DVector<f64>>) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let n = self.latents.first().map(|x| x.len()).unwrap_or(0);
        let hyperbolic = self.geometry == Geometry::Hyperbolic;
        let dy = self.mean.ncols();
        let mut header = vec!["step".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        if hyperbolic {
            header.extend((0..n - 1).map(|i| format!("p{i}")));
        }
        header.extend((1..=dy).map(|j| format!("mean_q{j}")));
        header.extend((1..=dy).map(|j| format!("var_q{j}")));
        w.write_record(&header)?;
        for (i, x) in self.latents.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(x.iter().map(|v| v.to_string()));
            if hyperbolic {
                rec.extend(raw::poincare(x).iter().map(|v| v.to_string()));
            }
            rec.extend((0..dy).map(|j| (self.mean[(i, j)] + offset.map_or(0.0, |o| o[j])).to_string()));
            rec.extend((0..dy).map(|j| self.variance[(i, j)].to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A frozen model prepared for generation.
#[derive(Clone, Debug)]
pub struct Generator {
    state: LatentState,
    data: ModelData,
    dataset: Dataset,
    gp: GpPosterior,
    dynamics: Option<DynamicsPosterior>,
    train_prior: Option<f64>,
    train_log_det: f64,
}

impl Generator {
    pub fn new(state: LatentState, dataset: &Dataset, graph: &TaxonomyGraph) -> Result<Self> {
        state.validate(dataset)?;
        let data = ModelData::new(dataset, graph)?;
        let gp = GpPosterior::from_state(&state, &data)?;
        let (dynamics, train_prior) = if state.kind.has_dynamics() {
            (Some(DynamicsPosterior::from_state(&state, &data)?), Some(dynamics_term(&state, &data, 1.0, None)?))
        } else {
            (None, None)
        };
        let train_log_det =
            log_det_term(gp.profile(), &state.latents, state.hyper.noise_y, state.hyper.kernel_y.jitter, 1.0, None)?;
        Ok(Self { state, data, dataset: dataset.clone(), gp, dynamics, train_prior, train_log_det })
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    pub fn geometry(&self) -> LatentGeometry {
        self.state.geometry()
    }

    pub fn posterior(&self) -> &GpPosterior {
        &self.gp
    }

    pub fn dynamics(&self) -> Result<&DynamicsPosterior> {
        self.dynamics
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no dynamics prior; use GPDM or GPHDM", self.state.kind)))
    }

    /// Medoid of the training endpoints labelled `label`.
    pub fn node_location(&self, label: &str) -> Result<DVector<f64>> {
        let geo = self.geometry();
        let pts: Vec<&DVector<f64>> = self
            .dataset
            .labelled_points()
            .into_iter()
            .filter(|(_, l)| l == label)
            .map(|(i, _)| &self.state.latents[i])
            .collect();
        if pts.is_empty() {
            return Err(Error::UnknownNode(label.to_string()));
        }
        let cost = |p: &DVector<f64>| pts.iter().map(|q| geo.distance(p, q)).sum::<f64>();
        Ok(pts.iter().min_by(|a, b| cost(a).total_cmp(&cost(b))).map(|p| (*p).clone()).expect("non-empty"))
    }

    /// Checks that `x` is a valid latent point for this model.
    pub fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        let geo = self.geometry();
        if x.len() != geo.coord_len() {
            return Err(Error::DimensionMismatch { expected: geo.coord_len(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent point".into()));
        }
        if geo.is_hyperbolic() {
            let residual = (raw::minkowski(x, x) + 1.0).abs();
            if residual > 1e-9 * x[0] * x[0] || x[0] <= 0.0 {
                return Err(Error::OffManifold { residual });
            }
        }
        Ok(())
    }

    pub fn decode_path(&self, latents: Vec<DVector<f64>>, method: Method, diagnostics: Diagnostics) -> GeneratedPath {
        let dy = self.gp.output_dim();
        let mut mean = DMatrix::zeros(latents.len(), dy);
        let mut variance = DMatrix::zeros(latents.len(), dy);
        for (i, x) in latents.iter().enumerate() {
            let (m, v) = self.gp.predict(x);
            mean.set_row(i, &m.transpose());
            variance.row_mut(i).fill(v);
        }
        GeneratedPath { method, geometry: self.state.kind.geometry(), latents, mean, variance, diagnostics }
    }

    /// Log-density of a generated path conditioned on the training data: the dynamics
    /// prior of its steps given the training transitions and, optionally, the density of
    /// its decoded means given the training observations.
    pub fn conditional_log_density(&self, path: &[DVector<f64>], include_likelihood: bool) -> Result<f64> {
        self.conditional_terms(path, include_likelihood, false).map(|(v, _)| v)
    }

    fn conditional_terms(&self, path: &[DVector<f64>], include_likelihood: bool, need_grad: bool) -> Result<(f64, Vec<DVector<f64>>)> {
        let train_prior = self.train_prior.ok_or_else(|| self.dynamics().err().expect("no dynamics"))?;
        let n = self.state.n_points();
        let m = path.len();
        let mut joint = self.state.clone();
        joint.latents.extend_from_slice(path);
        let mut ranges = self.data.ranges.clone();
        ranges.push(n..n + m);
        let chains = ModelData::chains(ranges);
        let mut acc = need_grad.then(|| Partials::zeros(&joint));
        let mut value = dynamics_term(&joint, &chains, 1.0, acc.as_mut())? - train_prior;
        if include_likelihood {
            let dy = self.gp.output_dim() as f64;
            let h = &self.state.hyper;
            let ld = log_det_term(self.gp.profile(), &joint.latents, h.noise_y, h.kernel_y.jitter, -0.5 * dy, acc.as_mut())?;
            value += -0.5 * dy * (ld - self.train_log_det) - 0.5 * m as f64 * dy * (2.0 * PI).ln();
        }
        let grads = acc.map(|a| a.latents[n..].to_vec()).unwrap_or_default();
        Ok((value, grads))
    }
}

/// Log-density of a local step `u` under `N(mean, diag(var))` times the volume factor
/// `(|u| / sinh |u|)^(D - 1)` (hyperbolic only).
pub fn step_log_density(u: &DVector<f64>, mean: &DVector<f64>, var: &DVector<f64>, hyperbolic: bool) -> f64 {
    let d = u.len();
    let mut lp = 0.0;
    for i in 0..d {
        lp += -0.5 * (u[i] - mean[i]).powi(2) / var[i] - 0.5 * (2.0 * PI * var[i]).ln();
    }
    if hyperbolic && d > 1 {
        lp += (d - 1) as f64 * log_rsinh(u.norm());
    }
    lp
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMle {
    pub step: DVector<f64>,
    pub log_density: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const MLE_MAX_ITERS: usize = 200;
pub const MLE_GRAD_TOL: f64 = 1e-7;

/// Maximizer of [`step_log_density`] over `u`, starting from the Gaussian mean.
///
/// The stationarity condition `u = m + diag(var) (D - 1) h(|u|) u` is iterated to a fixed
/// point; `h(rho) = (1/rho - coth rho) / rho` is bounded, so the map contracts whenever
/// `(D - 1) max(var) / 3 < 1`.
pub fn mle_step(mean: &DVector<f64>, var: &DVector<f64>, hyperbolic: bool) -> StepMle {
    let d = mean.len();
    let c = if hyperbolic && d > 1 { (d - 1) as f64 } else { 0.0 };
    let h = |rho: f64| if rho < 1e-3 { -1.0 / 3.0 + rho * rho / 45.0 } else { (1.0 / rho - 1.0 / rho.tanh()) / rho };
    let grad = |u: &DVector<f64>| DVector::from_fn(d, |i, _| -(u[i] - mean[i]) / var[i] + c * h(u.norm()) * u[i]);
    let mut u = mean.clone();
    let mut iterations = 0;
    let mut converged = c == 0.0;
    while !converged && iterations < MLE_MAX_ITERS {
        let hr = h(u.norm());
        u = DVector::from_fn(d, |i, _| mean[i] + var[i] * c * hr * u[i]);
        iterations += 1;
        converged = grad(&u).norm() < MLE_GRAD_TOL;
    }
    let log_density = step_log_density(&u, mean, var, hyperbolic);
    StepMle { step: u, log_density, iterations, converged }
}

/// Recursive mean prediction: each step maximizes the conditional density of the next
/// point given the current one.
pub fn mean_predict(gen: &Generator, x_start: &DVector<f64>, steps: usize) -> Result<GeneratedPath> {
    gen.check_point(x_start)?;
    let dynamics = gen.dynamics()?;
    let geo = gen.geometry();
    let mut latents = vec![x_start.clone()];
    let mut diag = Diagnostics { converged: true, ..Default::default() };
    for _ in 0..steps {
        let x = latents.last().expect("non-empty");
        let (m, v) = dynamics.predict_step(x);
        let mle = mle_step(&m, &v, geo.is_hyperbolic());
        diag.iterations += mle.iterations;
        diag.step_log_densities.push(mle.log_density);
        if !mle.converged {
            diag.converged = false;
            diag.warnings.push(format!("step {} did not converge", latents.len()));
        }
        let mut next = geo.apply_step(x, &mle.step);
        if geo.is_hyperbolic() {
            raw::renormalize(&mut next);
        }
        latents.push(next);
    }
    Ok(gen.decode_path(latents, Method::Mean, diag))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalOptions {
    /// Include the density of the decoded path given the training observations.
    pub include_likelihood: bool,
    pub max_iters: usize,
    pub patience: usize,
    pub lr: f64,
}

impl Default for ConditionalOptions {
    fn default() -> Self {
        Self { include_likelihood: true, max_iters: 300, patience: 50, lr: 0.01 }
    }
}

fn free_block(geo: &LatentGeometry, values: Vec<DVector<f64>>, lr: f64) -> ParameterBlock {
    let kind = if geo.is_hyperbolic() { BlockKind::LorentzPoints } else { BlockKind::UnconstrainedReals };
    ParameterBlock { name: "path".into(), kind, values, lr }
}

/// Optimizes the free points of an `m`-point path with the given anchors fixed. Segments
/// between anchors start as geodesics.
pub fn conditional_optimize(
    gen: &Generator,
    anchors: &[(usize, DVector<f64>)],
    m: usize,
    options: &ConditionalOptions,
) -> Result<GeneratedPath> {
    gen.dynamics()?;
    let geo = gen.geometry();
    if m < 2 {
        return Err(Error::InvalidArgument("a path needs at least 2 points".into()));
    }
    if anchors.first().map(|a| a.0) != Some(0) || anchors.last().map(|a| a.0) != Some(m - 1) {
        return Err(Error::InvalidArgument(format!("anchors must include indices 0 and {}", m - 1)));
    }
    if anchors.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidArgument("anchor indices must be strictly increasing".into()));
    }
    for (_, x) in anchors {
        gen.check_point(x)?;
    }
    let mut path = Vec::with_capacity(m);
    for w in anchors.windows(2) {
        let seg = geo.interpolate(&w[0].1, &w[1].1, w[1].0 - w[0].0 + 1);
        path.extend(seg.into_iter().take(w[1].0 - w[0].0));
    }
    path.push(anchors.last().expect("checked").1.clone());
    let mut diag = Diagnostics::default();
    // direction check against the learned flow at the start
    let (m0, _) = gen.dynamics()?.predict_step(&path[0]);
    let to_next = geo.step(&path[0], &path[1]);
    if m0.dot(&to_next) < 0.0 {
        diag.warnings.push(
            "the path starts against the training flow; training on reverse-augmented data allows both directions".into(),
        );
    }
    let free: Vec<usize> = (0..m).filter(|i| !anchors.iter().any(|a| a.0 == *i)).collect();
    if free.is_empty() {
        diag.log_density = Some(gen.conditional_log_density(&path, options.include_likelihood)?);
        diag.converged = true;
        return Ok(gen.decode_path(path, Method::Conditional, diag));
    }
    let block = free_block(&geo, free.iter().map(|&i| path[i].clone()).collect(), options.lr);
    let base = path.clone();
    let assemble = |b: &[ParameterBlock]| {
        let mut p = base.clone();
        for (k, &i) in free.iter().enumerate() {
            p[i] = b[0].values[k].clone();
        }
        p
    };
    let mut objective = |b: &[ParameterBlock]| -> Result<(f64, BlockGrads)> {
        let p = assemble(b);
        let (v, g) = gen.conditional_terms(&p, options.include_likelihood, true)?;
        Ok((-v, vec![free.iter().map(|&i| -&g[i]).collect()]))
    };
    let cfg = MinimizeConfig { max_iters: options.max_iters, grad_tol: 1e-6, patience: options.patience, ..Default::default() };
    let res = minimize(&mut objective, vec![block], &cfg)?;
    let path = assemble(&res.blocks);
    diag.log_density = Some(-res.best_loss);
    diag.objective_trace = res.best_trace.iter().map(|v| -v).collect();
    diag.iterations = res.iterations;
    diag.converged = res.stop == crate::optim::StopReason::GradientTolerance;
    Ok(gen.decode_path(path, Method::Conditional, diag))
}

/// `m` points at uniform fractions of the geodesic from `a` to `b`.
pub fn hyperbolic_geodesic(gen: &Generator, a: &DVector<f64>, b: &DVector<f64>, m: usize) -> Result<GeneratedPath> {
    gen.check_point(a)?;
    gen.check_point(b)?;
    if m < 2 {
        return Err(Error::InvalidArgument("a path needs at least 2 points".into()));
    }
    let geo = gen.geometry();
    let latents = geo.interpolate(a, b, m);
    let length = geo.distance(a, b);
    let diag = Diagnostics { length: Some(length), converged: true, ..Default::default() };
    Ok(gen.decode_path(latents, Method::Geodesic, diag))
}

/// A field of metric matrices in ambient coordinates.
///
/// For hyperbolic points the matrix `M` is in the projected form `P (..) P^T` and
/// measures a tangent vector `v` as `(G v)^T M (G v)`; for Euclidean points `v^T M v`.
pub trait MetricField: Sync {
    fn geometry(&self) -> LatentGeometry;
    fn metric(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// `scale` times the intrinsic metric of the latent space.
#[derive(Clone, Copy, Debug)]
pub struct ScaledIntrinsicMetric {
    pub geo: LatentGeometry,
    pub scale: f64,
}

impl MetricField for ScaledIntrinsicMetric {
    fn geometry(&self) -> LatentGeometry {
        self.geo
    }

    fn metric(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = x.len();
        let mut g = DMatrix::identity(n, n) * self.scale;
        if self.geo.is_hyperbolic() {
            g[(0, 0)] = -self.scale;
        }
        Ok(g)
    }
}

/// Expected pullback metric of the observation GP:
/// `P (mu_J^T mu_J + D_y Sigma_J) P^T` with `P = G + x x^T` (identity for Euclidean).
#[derive(Clone, Copy, Debug)]
pub struct PullbackMetric<'a> {
    gp: &'a GpPosterior,
    geo: LatentGeometry,
}

impl<'a> PullbackMetric<'a> {
    pub fn new(gen: &'a Generator) -> Self {
        Self { gp: gen.posterior(), geo: gen.geometry() }
    }

    pub fn from_posterior(gp: &'a GpPosterior, geo: LatentGeometry) -> Self {
        Self { gp, geo }
    }

    /// Mean Jacobian `mu_J` (`D_y x (D+1)`), rows are ambient gradients of each output.
    pub fn mean_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.gp.mean_jacobian(x).transpose()
    }

    pub fn jacobian_covariance(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.gp.jacobian_covariance(x)
    }

    pub fn expected_metric(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mj = self.mean_jacobian(x);
        let inner = mj.transpose() * &mj + self.jacobian_covariance(x) * self.gp.output_dim() as f64;
        let m = if self.geo.is_hyperbolic() {
            let n = x.len();
            let mut p = x * x.transpose();
            for i in 0..n {
                p[(i, i)] += if i == 0 { -1.0 } else { 1.0 };
            }
            &p * inner * p.transpose()
        } else {
            inner
        };
        (&m + m.transpose()) * 0.5
    }
}

impl MetricField for PullbackMetric<'_> {
    fn geometry(&self) -> LatentGeometry {
        self.geo
    }

    fn metric(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.expected_metric(x))
    }
}

fn tangent(geo: &LatentGeometry, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    if geo.is_hyperbolic() {
        raw::log(a, b)
    } else {
        b - a
    }
}

fn quad(geo: &LatentGeometry, m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    if geo.is_hyperbolic() {
        let w = flip(v);
        w.dot(&(m * &w))
    } else {
        v.dot(&(m * v))
    }
}

/// `(energy, spline energy)` of a discrete path given the metric at every point.
///
/// The energy is `sum_i |Log_{x_i} x_{i+1}|^2_{M_i}`; the spline term sums
/// `|Log_{x_i} x_{i+1} + Log_{x_i} x_{i-1}|^2_{M_i}` over interior points.
pub fn curve_energy(geo: &LatentGeometry, pts: &[DVector<f64>], metrics: &[DMatrix<f64>]) -> (f64, f64) {
    let mut e = 0.0;
    let mut s = 0.0;
    for i in 0..pts.len() - 1 {
        let fwd = tangent(geo, &pts[i], &pts[i + 1]);
        e += quad(geo, &metrics[i], &fwd);
        if i > 0 {
            let acc = fwd + tangent(geo, &pts[i], &pts[i - 1]);
            s += quad(geo, &metrics[i], &acc);
        }
    }
    (e, s)
}

/// Length of a discrete path under a metric field.
pub fn curve_length<F: MetricField>(metric: &F, pts: &[DVector<f64>]) -> Result<f64> {
    let geo = metric.geometry();
    let mut l = 0.0;
    for w in pts.windows(2) {
        l += quad(&geo, &metric.metric(&w[0])?, &tangent(&geo, &w[0], &w[1])).max(0.0).sqrt();
    }
    Ok(l)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullbackOptions {
    /// Weight of the spline energy.
    pub lambda: f64,
    pub max_iters: usize,
    pub lr: f64,
    /// Step of the central differences along local basis directions.
    pub fd_step: f64,
    pub grad_tol: f64,
}

impl Default for PullbackOptions {
    fn default() -> Self {
        Self { lambda: 1.0, max_iters: 300, lr: 0.01, fd_step: 1e-5, grad_tol: 1e-6 }
    }
}

/// Consecutive energy increases after which optimization is declared divergent.
pub const DIVERGENCE_WINDOW: usize = 100;

/// Result of [`optimize_curve`].
#[derive(Clone, Debug)]
pub struct CurveResult {
    pub points: Vec<DVector<f64>>,
    pub energy: f64,
    pub best_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `E + lambda E_spline` over the interior points of `init` with Riemannian
/// Adam; gradients are central differences along local basis directions.
pub fn optimize_curve<F: MetricField>(metric: &F, init: Vec<DVector<f64>>, options: &PullbackOptions) -> Result<CurveResult> {
    let geo = metric.geometry();
    let m = init.len();
    if m < 3 {
        return Err(Error::InvalidArgument("a curve needs at least 3 points".into()));
    }
    let total = |pts: &[DVector<f64>], mets: &[DMatrix<f64>]| {
        let (e, s) = curve_energy(&geo, pts, mets);
        e + options.lambda * s
    };
    let mut pts = init;
    let mut mets: Vec<DMatrix<f64>> = pts.iter().map(|x| metric.metric(x)).collect::<Result<_>>()?;
    let mut blocks = vec![free_block(&geo, pts[1..m - 1].to_vec(), options.lr)];
    let mut adam = AdamState::new(&blocks, AdamConfig::default());
    let mut best = (f64::INFINITY, pts.clone());
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    let mut increases = 0;
    let mut converged = false;
    let mut iterations = 0;
    let h = options.fd_step;
    loop {
        let value = total(&pts, &mets);
        if !value.is_finite() {
            return Err(Error::NonFinite("curve energy".into()));
        }
        if value < best.0 {
            best = (value, pts.clone());
        }
        trace.push(best.0);
        if value > prev {
            increases += 1;
            if increases >= DIVERGENCE_WINDOW {
                return Err(Error::Diverged(format!("curve energy increased for {DIVERGENCE_WINDOW} consecutive iterations")));
            }
        } else {
            increases = 0;
        }
        prev = value;
        if iterations >= options.max_iters {
            break;
        }
        let grads: Vec<DVector<f64>> = (1..m - 1)
            .into_par_iter()
            .map(|i| -> Result<DVector<f64>> {
                let x = &pts[i];
                let mut local = DVector::zeros(geo.dim);
                for e in 0..geo.dim {
                    let mut dir = DVector::zeros(geo.dim);
                    dir[e] = h;
                    let mut f = [0.0; 2];
                    for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                        let mut p = pts.clone();
                        let mut ms = mets.clone();
                        p[i] = geo.apply_step(x, &(&dir * sign));
                        ms[i] = metric.metric(&p[i])?;
                        f[k] = total(&p, &ms);
                    }
                    local[e] = (f[0] - f[1]) / (2.0 * h);
                }
                Ok(if geo.is_hyperbolic() { flip(&(raw::basis(x) * local)) } else { local })
            })
            .collect::<Result<_>>()?;
        let grads = vec![grads];
        if gradient_norm(&blocks, &grads) < options.grad_tol {
            converged = true;
            break;
        }
        adam_step(&mut adam, &mut blocks, &grads)?;
        for (k, x) in blocks[0].values.iter().enumerate() {
            pts[k + 1] = x.clone();
            mets[k + 1] = metric.metric(x)?;
        }
        iterations += 1;
    }
    Ok(CurveResult { points: best.1, energy: best.0, best_trace: trace, iterations, converged })
}

/// Geodesic of the expected pullback metric between `a` and `b`, discretized with `m`
/// points and initialized on the hyperbolic geodesic.
pub fn pullback_geodesic(
    gen: &Generator,
    a: &DVector<f64>,
    b: &DVector<f64>,
    m: usize,
    options: &PullbackOptions,
) -> Result<GeneratedPath> {
    gen.check_point(a)?;
    gen.check_point(b)?;
    if m < 3 {
        return Err(Error::InvalidArgument("a pullback geodesic needs at least 3 points".into()));
    }
    if !(options.lambda >= 0.0) {
        return Err(Error::InvalidArgument("lambda must be non-negative".into()));
    }
    let metric = PullbackMetric::new(gen);
    let init = gen.geometry().interpolate(a, b, m);
    let res = optimize_curve(&metric, init, options)?;
    let diag = Diagnostics {
        energy: Some(res.energy),
        length: Some(curve_length(&metric, &res.points)?),
        objective_trace: res.best_trace,
        iterations: res.iterations,
        converged: res.converged,
        ..Default::default()
    };
    Ok(gen.decode_path(res.points, Method::Pullback, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthConfig};
    use crate::model::{fit, ModelKind, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_generator(kind: ModelKind, iters: usize) -> (Generator, Dataset) {
        let g = TaxonomyGraph::binary_tree(2);
        let ds = synthesize(&g, &SynthConfig { points_per_trajectory: 10, ..Default::default() }).unwrap();
        let cfg = TrainConfig { max_iters: iters, ..Default::default() };
        let (s, _) = fit(&ds, &g, kind, 2, &cfg).unwrap();
        (Generator::new(s, &ds, &g).unwrap(), ds)
    }

    #[test]
    fn mle_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let mean = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
            let var = DVector::from_fn(2, |_, _| rng.random_range(0.01..0.2));
            let mle = mle_step(&mean, &var, true);
            assert!(mle.converged);
            let radius = 3.0 * mean.norm().max(var.amax().sqrt());
            let n = 41;
            let mut best = (f64::NEG_INFINITY, DVector::zeros(2));
            for i in 0..n {
                for j in 0..n {
                    let u = DVector::from_vec(vec![
                        -radius + 2.0 * radius * i as f64 / (n - 1) as f64,
                        -radius + 2.0 * radius * j as f64 / (n - 1) as f64,
                    ]);
                    let lp = step_log_density(&u, &mean, &var, true);
                    if lp > best.0 {
                        best = (lp, u);
                    }
                }
            }
            let cell = 2.0 * radius / (n - 1) as f64;
            assert!((&mle.step - &best.1).amax() <= cell);
            assert!(mle.log_density >= best.0 - 1e-12);
        }
    }

    #[test]
    fn euclidean_mle_is_the_mean() {
        let mean = DVector::from_vec(vec![0.3, -0.2]);
        let mle = mle_step(&mean, &DVector::from_vec(vec![0.1, 0.4]), false);
        assert_eq!(mle.step, mean);
    }

    #[test]
    fn mean_prediction_stays_on_manifold() {
        let (gen, ds) = small_generator(ModelKind::Gphdm, 40);
        let x0 = gen.state().latents[ds.ranges()[0].start + 3].clone();
        let path = mean_predict(&gen, &x0, 12).unwrap();
        assert_eq!(path.len(), 13);
        assert_eq!(path.mean.shape(), (13, ds.output_dim()));
        for x in &path.latents {
            assert!((raw::minkowski(x, x) + 1.0).abs() < 1e-9);
        }
        assert!(path.diagnostics.converged);
        let csv = path.to_csv(Some(&ds.offset)).unwrap();
        assert_eq!(csv.lines().count(), 14);
        assert!(csv.starts_with("step,x0,x1,x2,p0,p1,mean_q1"));
    }

    #[test]
    fn static_models_cannot_predict() {
        let (gen, _) = small_generator(ModelKind::Gphlvm, 2);
        let x0 = gen.state().latents[0].clone();
        assert!(matches!(mean_predict(&gen, &x0, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn geodesic_examples() {
        let (gen, _) = small_generator(ModelKind::Gphdm, 2);
        let geo = gen.geometry();
        let a = geo.from_origin(&DVector::from_vec(vec![-1.0, 0.3]));
        let b = geo.from_origin(&DVector::from_vec(vec![0.8, 0.9]));
        assert_eq!(hyperbolic_geodesic(&gen, &a, &b, 2).unwrap().len(), 2);
        let p = hyperbolic_geodesic(&gen, &a, &b, 11).unwrap();
        let mid = &p.latents[5];
        assert!((geo.distance(mid, &a) - geo.distance(mid, &b)).abs() < 1e-9);
        let total: f64 = p.latents.windows(2).map(|w| geo.distance(&w[0], &w[1])).sum();
        assert!((total - geo.distance(&a, &b)).abs() < 1e-8);
    }

    #[test]
    fn anchored_paths_are_only_evaluated() {
        let (gen, _) = small_generator(ModelKind::Gphdm, 20);
        let geo = gen.geometry();
        let pts: Vec<DVector<f64>> = geo.interpolate(&gen.state().latents[0], &gen.state().latents[9], 4);
        let anchors: Vec<(usize, DVector<f64>)> = pts.iter().cloned().enumerate().collect();
        let p = conditional_optimize(&gen, &anchors, 4, &ConditionalOptions::default()).unwrap();
        assert_eq!(p.latents, pts);
        assert!(p.diagnostics.log_density.unwrap().is_finite());
        assert!(conditional_optimize(&gen, &anchors[1..], 4, &ConditionalOptions::default()).is_err());
    }

    #[test]
    fn conditional_gradient_matches_finite_differences() {
        let (gen, _) = small_generator(ModelKind::Gphdm, 20);
        let geo = gen.geometry();
        let a = gen.state().latents[0].clone();
        let b = gen.state().latents[19].clone();
        let mut path = geo.interpolate(&a, &b, 6);
        path[2] = geo.apply_step(&path[2], &DVector::from_vec(vec![0.05, -0.1]));
        for lik in [false, true] {
            let (_, g) = gen.conditional_terms(&path, lik, true).unwrap();
            let h = 1e-5;
            for i in [2, 4] {
                let local = raw::basis(&path[i]).transpose() * &g[i];
                for e in 0..2 {
                    let mut dir = DVector::zeros(2);
                    dir[e] = h;
                    let mut up = path.clone();
                    up[i] = geo.apply_step(&path[i], &dir);
                    let mut dn = path.clone();
                    dn[i] = geo.apply_step(&path[i], &(-dir));
                    let fd = (gen.conditional_log_density(&up, lik).unwrap() - gen.conditional_log_density(&dn, lik).unwrap()) / (2.0 * h);
                    assert!((local[e] - fd).abs() < 1e-5 * fd.abs().max(1.0), "{lik} {i} {e}: {} vs {fd}", local[e]);
                }
            }
        }
    }

    #[test]
    fn conditional_optimization_improves_on_the_geodesic() {
        let (gen, ds) = small_generator(ModelKind::Gphdm, 60);
        let r = ds.ranges();
        let a = gen.state().latents[r[0].start].clone();
        let b = gen.state().latents[r[1].end - 1].clone();
        let opts = ConditionalOptions { max_iters: 60, ..Default::default() };
        let p = conditional_optimize(&gen, &[(0, a.clone()), (9, b.clone())], 10, &opts).unwrap();
        let geo_path = gen.geometry().interpolate(&a, &b, 10);
        let base = gen.conditional_log_density(&geo_path, true).unwrap();
        assert!(p.diagnostics.log_density.unwrap() >= base - 1e-9);
        let trace = &p.diagnostics.objective_trace;
        assert!(trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn pullback_metric_structure() {
        let (gen, _) = small_generator(ModelKind::Gphdm, 20);
        let pm = PullbackMetric::new(&gen);
        let x = gen.geometry().from_origin(&DVector::from_vec(vec![0.3, -0.4]));
        let m = pm.expected_metric(&x);
        assert!((&m - m.transpose()).amax() < 1e-12);
        assert!((&m * flip(&x)).norm() < 1e-8 * m.norm().max(1.0));
        let eig = m.symmetric_eigen().eigenvalues;
        let scale = eig.amax();
        assert_eq!(eig.iter().filter(|v| v.abs() < 1e-8 * scale.max(1.0)).count(), 1);
        assert!(eig.iter().all(|v| *v > -1e-8 * scale.max(1.0)));
    }

    #[test]
    fn conformal_metric_recovers_the_geodesic() {
        let geo = LatentGeometry::new(Geometry::Hyperbolic, 2);
        let metric = ScaledIntrinsicMetric { geo, scale: 3.0 };
        let a = geo.from_origin(&DVector::from_vec(vec![-1.0, 0.2]));
        let b = geo.from_origin(&DVector::from_vec(vec![1.0, 0.6]));
        let exact = geo.interpolate(&a, &b, 8);
        let res = optimize_curve(&metric, exact.clone(), &PullbackOptions { max_iters: 20, ..Default::default() }).unwrap();
        for (p, q) in res.points.iter().zip(&exact) {
            assert!(geo.distance(p, q) < 1e-4);
        }
        let mut bent = exact.clone();
        for (i, x) in bent.iter_mut().enumerate().skip(1).take(6) {
            *x = geo.apply_step(x, &DVector::from_vec(vec![0.0, 0.1 * (i as f64 * 0.7).sin()]));
        }
        let opts = PullbackOptions { max_iters: 2000, lr: 0.005, ..Default::default() };
        let res = optimize_curve(&metric, bent, &opts).unwrap();
        for (p, q) in res.points.iter().zip(&exact) {
            assert!(geo.distance(p, q) < 5e-3, "{}", geo.distance(p, q));
        }
        assert!(res.best_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn pullback_refinement_is_stable() {
        let (gen, ds) = small_generator(ModelKind::Gphdm, 60);
        let r = ds.ranges();
        let a = gen.state().latents[r[0].start + 2].clone();
        let b = gen.state().latents[r[0].end - 3].clone();
        let opts = PullbackOptions { max_iters: 400, ..Default::default() };
        let coarse = pullback_geodesic(&gen, &a, &b, 16, &opts).unwrap();
        let fine = pullback_geodesic(&gen, &a, &b, 32, &opts).unwrap();
        let pm = PullbackMetric::new(&gen);
        let scaled = |p: &GeneratedPath| {
            let mets: Vec<DMatrix<f64>> = p.latents.iter().map(|x| pm.expected_metric(x)).collect();
            (p.len() - 1) as f64 * curve_energy(&gen.geometry(), &p.latents, &mets).0
        };
        let (ec, ef) = (scaled(&coarse), scaled(&fine));
        assert!((ec - ef).abs() / ec < 0.02, "{ec} {ef}");
    }
}
