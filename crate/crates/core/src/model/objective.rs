//! Log-likelihood, latent priors, stress and back constraints, with analytic gradients.
//!
//! Gradients are ambient partial derivatives with respect to the stored latent
//! coordinates, and derivatives with respect to the logarithms of the hyperparameters in
//! the packed layout of [`Hyperparameters::pack`](super::Hyperparameters::pack).

use std::borrow::Cow;
use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::geometry::{flip, LatentGeometry};
use super::LatentState;
use crate::data::{Dataset, TaxonomyGraph};
use crate::error::{Error, Result};
use crate::kernels::{factor_with_jitter, KernelEval, KernelKind, KernelProfile};

const H_KAPPA_Y: usize = 0;
const H_VAR_Y: usize = 1;
const H_NOISE_Y: usize = 2;
const H_KAPPA_X: usize = 3;
const H_VAR_X: usize = 4;
const H_NOISE_X: usize = 5;

/// Observations and label structure prepared once per dataset.
#[derive(Clone, Debug)]
pub struct ModelData {
    /// Stacked observations, `N x D_y`.
    pub y: DMatrix<f64>,
    pub ranges: Vec<Range<usize>>,
    /// `(i, j, graph distance)` for labelled endpoints `i < j`.
    pub stress_pairs: Vec<(usize, usize, f64)>,
    /// Median pairwise distance between observations.
    pub bc_lengthscale: f64,
    bc_kernel: DMatrix<f64>,
}

impl ModelData {
    pub fn new(dataset: &Dataset, graph: &TaxonomyGraph) -> Result<Self> {
        let y = dataset.stacked();
        let labelled = dataset.labelled_points();
        let mut stress_pairs = Vec::new();
        for a in 0..labelled.len() {
            for b in a + 1..labelled.len() {
                let (i, li) = &labelled[a];
                let (j, lj) = &labelled[b];
                stress_pairs.push((*i, *j, crate::data::graph_distance(graph, li, lj)? as f64));
            }
        }
        let bc_lengthscale = median_heuristic(&y);
        let bc_kernel = observation_kernel(&y, bc_lengthscale);
        Ok(Self { y, ranges: dataset.ranges(), stress_pairs, bc_lengthscale, bc_kernel })
    }

    pub fn n_points(&self) -> usize {
        self.y.nrows()
    }

    /// Chain structure only, for evaluating dynamics terms on arbitrary point sets.
    pub(crate) fn chains(ranges: Vec<Range<usize>>) -> Self {
        let n = ranges.iter().map(|r| r.end).max().unwrap_or(0);
        Self { y: DMatrix::zeros(n, 0), ranges, stress_pairs: Vec::new(), bc_lengthscale: 1.0, bc_kernel: DMatrix::zeros(0, 0) }
    }

    /// Consecutive `(t, t + 1)` pairs inside each trajectory.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        self.ranges.iter().flat_map(|r| (r.start..r.end - 1).map(|t| (t, t + 1))).collect()
    }

    /// Gram matrix of the back-constraint kernel for a given lengthscale.
    pub fn bc_kernel(&self, lengthscale: f64) -> Cow<'_, DMatrix<f64>> {
        if lengthscale == self.bc_lengthscale {
            Cow::Borrowed(&self.bc_kernel)
        } else {
            Cow::Owned(observation_kernel(&self.y, lengthscale))
        }
    }
}

/// Median of the pairwise Euclidean distances between rows (1 if all coincide).
pub fn median_heuristic(y: &DMatrix<f64>) -> f64 {
    let n = y.nrows();
    let mut d: Vec<f64> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in 0..i {
            d.push((y.row(i) - y.row(j)).norm());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Unit-variance squared-exponential kernel between observation rows.
pub fn observation_kernel(y: &DMatrix<f64>, lengthscale: f64) -> DMatrix<f64> {
    let n = y.nrows();
    let mut k = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = (-(y.row(i) - y.row(j)).norm_squared() / (2.0 * lengthscale * lengthscale)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Terms of the training loss `-b1 loglik - b2 logprior + b3 stress`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub log_likelihood: f64,
    pub log_prior: f64,
    pub stress: f64,
    pub loss: f64,
}

/// Partial derivatives of the training loss.
#[derive(Clone, Debug)]
pub struct Partials {
    pub latents: Vec<DVector<f64>>,
    /// With respect to the logarithms of the packed hyperparameters.
    pub hyper: Vec<f64>,
}

impl Partials {
    pub(crate) fn zeros(state: &LatentState) -> Self {
        Self {
            latents: state.latents.iter().map(|x| DVector::zeros(x.len())).collect(),
            hyper: vec![0.0; state.hyper.packed_len()],
        }
    }
}

/// Kernel evaluations for all pairs `j < i`, packed row by row.
struct PairEvals {
    evals: Vec<KernelEval>,
}

impl PairEvals {
    #[inline]
    fn get(&self, i: usize, j: usize) -> &KernelEval {
        &self.evals[i * (i - 1) / 2 + j]
    }
}

fn assemble(profile: &KernelProfile, pts: &[DVector<f64>]) -> (DMatrix<f64>, PairEvals) {
    let n = pts.len();
    let mut k = DMatrix::zeros(n, n);
    let mut evals = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        k[(i, i)] = profile.variance();
        for j in 0..i {
            let ev = profile.eval(profile.distance(&pts[i], &pts[j]));
            k[(i, j)] = ev.k;
            k[(j, i)] = ev.k;
            evals.push(ev);
        }
    }
    (k, PairEvals { evals })
}

/// Chain rule from `dT/dK` (symmetric `w`) into point and log-hyperparameter partials.
///
/// `k` is the kernel matrix including `variance * jitter` on its diagonal; `slots` maps
/// each kernel point to its latent index.
#[allow(clippy::too_many_arguments)]
fn backprop_gram(
    profile: &KernelProfile,
    pts: &[DVector<f64>],
    evals: &PairEvals,
    k: &DMatrix<f64>,
    w: &DMatrix<f64>,
    slots: &dyn Fn(usize) -> usize,
    acc: &mut Partials,
    hyper_slots: (usize, usize),
) {
    let hyperbolic = profile.kind() != KernelKind::Euclidean;
    let mut d_logk = 0.0;
    let mut d_logvar = 0.0;
    for i in 0..pts.len() {
        d_logvar += w[(i, i)] * k[(i, i)];
        for j in 0..i {
            let ev = evals.get(i, j);
            let wij = w[(i, j)] + w[(j, i)];
            d_logk += wij * ev.dk_dlog_lengthscale;
            d_logvar += wij * ev.k;
            let s = wij * ev.dk_darg;
            if s == 0.0 {
                continue;
            }
            if hyperbolic {
                acc.latents[slots(i)] -= flip(&pts[j]) * s;
                acc.latents[slots(j)] -= flip(&pts[i]) * s;
            } else {
                let diff = (&pts[i] - &pts[j]) * s;
                acc.latents[slots(i)] += &diff;
                acc.latents[slots(j)] -= &diff;
            }
        }
    }
    acc.hyper[hyper_slots.0] += d_logk;
    acc.hyper[hyper_slots.1] += d_logvar;
}

fn log_det(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn likelihood_term(state: &LatentState, data: &ModelData, scale: f64, acc: Option<&mut Partials>) -> Result<f64> {
    let profile = state.profile_y()?;
    let (mut c, evals) = assemble(&profile, &state.latents);
    for i in 0..c.nrows() {
        c[(i, i)] += state.hyper.noise_y;
    }
    let (c, chol) = factor_with_jitter(c, profile.variance() * state.hyper.kernel_y.jitter)?;
    let (n, dy) = data.y.shape();
    let a = chol.solve(&data.y);
    let value = -0.5 * data.y.component_mul(&a).sum() - 0.5 * dy as f64 * log_det(&chol)
        - 0.5 * (n * dy) as f64 * (2.0 * PI).ln();
    if let Some(acc) = acc {
        let w = (&a * a.transpose() - chol.inverse() * dy as f64) * (0.5 * scale);
        let mut kernel = c;
        for i in 0..n {
            kernel[(i, i)] -= state.hyper.noise_y;
        }
        backprop_gram(&profile, &state.latents, &evals, &kernel, &w, &|i| i, acc, (H_KAPPA_Y, H_VAR_Y));
        acc.hyper[H_NOISE_Y] += state.hyper.noise_y * w.trace();
    }
    Ok(value)
}

/// `scale * log det(K + noise I)` over `pts`, accumulating into the latent partials.
pub(crate) fn log_det_term(
    profile: &KernelProfile,
    pts: &[DVector<f64>],
    noise: f64,
    jitter: f64,
    scale: f64,
    acc: Option<&mut Partials>,
) -> Result<f64> {
    let (mut c, evals) = assemble(profile, pts);
    for i in 0..c.nrows() {
        c[(i, i)] += noise;
    }
    let (c, chol) = factor_with_jitter(c, profile.variance() * jitter)?;
    let value = log_det(&chol);
    if let Some(acc) = acc {
        let w = chol.inverse() * scale;
        let mut kernel = c;
        for i in 0..pts.len() {
            kernel[(i, i)] -= noise;
        }
        backprop_gram(profile, pts, &evals, &kernel, &w, &|i| i, acc, (H_KAPPA_Y, H_VAR_Y));
    }
    Ok(value)
}

/// Sum over output dimensions of `log N(y_d; 0, K_Y + sigma_y^2 I)`.
pub fn log_likelihood(state: &LatentState, data: &ModelData) -> Result<f64> {
    likelihood_term(state, data, 1.0, None)
}

/// `sum_d log N(u_d; 0, K + sigma_d^2 I)` for steps `U` (`M x D`) and an arbitrary `K`.
pub fn step_log_density(steps: &DMatrix<f64>, k: &DMatrix<f64>, noise: &[f64]) -> Result<f64> {
    let m = steps.nrows();
    if k.shape() != (m, m) || noise.len() != steps.ncols() {
        return Err(Error::DimensionMismatch { expected: m, got: k.nrows() });
    }
    let mut total = 0.0;
    for (d, &s2) in noise.iter().enumerate() {
        let mut c = k.clone();
        for i in 0..m {
            c[(i, i)] += s2;
        }
        let (_, chol) = factor_with_jitter(c, 0.0)?;
        let u = steps.column(d).into_owned();
        let beta = chol.solve(&u);
        total += -0.5 * u.dot(&beta) - 0.5 * log_det(&chol) - 0.5 * m as f64 * (2.0 * PI).ln();
    }
    Ok(total)
}

pub(crate) fn dynamics_term(state: &LatentState, data: &ModelData, scale: f64, mut acc: Option<&mut Partials>) -> Result<f64> {
    let geo = state.geometry();
    let x = &state.latents;
    let trans = data.transitions();
    let dim = state.latent_dim;
    let mut value = 0.0;
    for r in &data.ranges {
        value += geo.isotropic_log_prior(&x[r.start], state.alpha);
        if let Some(acc) = acc.as_deref_mut() {
            acc.latents[r.start] += geo.isotropic_log_prior_grad(&x[r.start], state.alpha) * scale;
        }
    }
    for &(s, t) in &trans {
        value += geo.log_volume(&x[s], &x[t]);
        if let Some(acc) = acc.as_deref_mut() {
            let (gs, gt) = geo.log_volume_grad(&x[s], &x[t]);
            acc.latents[s] += gs * scale;
            acc.latents[t] += gt * scale;
        }
    }
    if trans.is_empty() {
        return Ok(value);
    }
    let m = trans.len();
    let sources: Vec<DVector<f64>> = trans.iter().map(|&(s, _)| x[s].clone()).collect();
    let mut steps = DMatrix::zeros(m, dim);
    for (i, &(s, t)) in trans.iter().enumerate() {
        steps.set_row(i, &geo.step(&x[s], &x[t]).transpose());
    }
    let profile = state.profile_x()?;
    let (kx, evals) = assemble(&profile, &sources);
    let jitter = profile.variance() * state.hyper.kernel_x.jitter;
    let mut w_x = DMatrix::zeros(m, m);
    let mut step_grads = DMatrix::zeros(m, dim);
    let mut used_jitter = jitter;
    for d in 0..dim {
        let s2 = state.hyper.noise_x[d];
        let mut c = kx.clone();
        for i in 0..m {
            c[(i, i)] += s2;
        }
        let (cj, chol) = factor_with_jitter(c, jitter)?;
        used_jitter = cj[(0, 0)] - kx[(0, 0)] - s2;
        let u = steps.column(d).into_owned();
        let beta = chol.solve(&u);
        value += -0.5 * u.dot(&beta) - 0.5 * log_det(&chol) - 0.5 * m as f64 * (2.0 * PI).ln();
        if acc.is_some() {
            let cinv = chol.inverse();
            let bb = beta.norm_squared();
            w_x += (&beta * beta.transpose() - &cinv) * 0.5;
            step_grads.set_column(d, &(-&beta));
            if let Some(acc) = acc.as_deref_mut() {
                acc.hyper[H_NOISE_X + d] += scale * s2 * 0.5 * (bb - cinv.trace());
            }
        }
    }
    if let Some(acc) = acc {
        let mut kj = kx;
        for i in 0..m {
            kj[(i, i)] += used_jitter;
        }
        w_x *= scale;
        backprop_gram(&profile, &sources, &evals, &kj, &w_x, &|i| trans[i].0, acc, (H_KAPPA_X, H_VAR_X));
        for (i, &(s, t)) in trans.iter().enumerate() {
            let g = step_grads.row(i).transpose() * scale;
            let (gs, gt) = geo.step_vjp(&x[s], &x[t], &g);
            acc.latents[s] += gs;
            acc.latents[t] += gt;
        }
    }
    Ok(value)
}

/// Dynamics prior: isotropic prior on each trajectory start, GP prior on the local steps
/// of every within-trajectory transition, and the volume correction of each step.
pub fn log_dynamics_prior(state: &LatentState, data: &ModelData) -> Result<f64> {
    dynamics_term(state, data, 1.0, None)
}

fn iid_prior_term(state: &LatentState, scale: f64, acc: Option<&mut Partials>) -> f64 {
    let geo = state.geometry();
    let value = state.latents.iter().map(|x| geo.isotropic_log_prior(x, state.alpha)).sum();
    if let Some(acc) = acc {
        for (g, x) in acc.latents.iter_mut().zip(&state.latents) {
            *g += geo.isotropic_log_prior_grad(x, state.alpha) * scale;
        }
    }
    value
}

/// Independent isotropic prior on every latent point.
pub fn log_iid_prior(state: &LatentState) -> f64 {
    iid_prior_term(state, 1.0, None)
}

/// Dynamics prior for dynamical models, iid prior otherwise.
pub fn log_latent_prior(state: &LatentState, data: &ModelData) -> Result<f64> {
    if state.kind.has_dynamics() {
        log_dynamics_prior(state, data)
    } else {
        Ok(log_iid_prior(state))
    }
}

/// `sum over labelled pairs of (d_graph - d_latent)^2`.
pub fn stress_loss(geo: &LatentGeometry, latents: &[DVector<f64>], pairs: &[(usize, usize, f64)]) -> f64 {
    pairs.iter().map(|&(i, j, a)| (a - geo.distance(&latents[i], &latents[j])).powi(2)).sum()
}

fn stress_term(state: &LatentState, data: &ModelData, scale: f64, acc: Option<&mut Partials>) -> f64 {
    let geo = state.geometry();
    let x = &state.latents;
    if let Some(acc) = acc {
        for &(i, j, a) in &data.stress_pairs {
            acc.latents[i] += geo.stress_term_grad(&x[i], &x[j], a) * scale;
            acc.latents[j] += geo.stress_term_grad(&x[j], &x[i], a) * scale;
        }
    }
    stress_loss(&geo, x, &data.stress_pairs)
}

fn evaluate_impl(state: &LatentState, data: &ModelData, mut acc: Option<&mut Partials>) -> Result<LossBreakdown> {
    let w = state.weights;
    let log_likelihood = likelihood_term(state, data, -w.likelihood, acc.as_deref_mut())?;
    let log_prior = if state.kind.has_dynamics() {
        dynamics_term(state, data, -w.prior, acc.as_deref_mut())?
    } else {
        iid_prior_term(state, -w.prior, acc.as_deref_mut())
    };
    let stress = stress_term(state, data, w.stress, acc);
    let loss = -w.likelihood * log_likelihood - w.prior * log_prior + w.stress * stress;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(LossBreakdown { log_likelihood, log_prior, stress, loss })
}

pub fn evaluate(state: &LatentState, data: &ModelData) -> Result<LossBreakdown> {
    evaluate_impl(state, data, None)
}

/// Loss terms and partial derivatives of the loss with respect to the stored latents and
/// log-hyperparameters.
pub fn evaluate_with_gradient(state: &LatentState, data: &ModelData) -> Result<(LossBreakdown, Partials)> {
    let mut acc = Partials::zeros(state);
    let b = evaluate_impl(state, data, Some(&mut acc))?;
    Ok((b, acc))
}

/// Tangent vectors `W k_Y(y_n, Y)` at the origin chart.
fn back_tangents(state: &LatentState, data: &ModelData) -> Result<DMatrix<f64>> {
    let bc = state
        .back
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("state has no back-constraint weights".into()))?;
    Ok(&bc.weights * data.bc_kernel(bc.lengthscale).as_ref())
}

/// Latents as functions of the observations: `x_n = Exp_{mu_0}((0, W k(y_n, Y)))`.
pub fn back_constrain(state: &LatentState, data: &ModelData) -> Result<Vec<DVector<f64>>> {
    let geo = state.geometry();
    let v = back_tangents(state, data)?;
    Ok(v.column_iter().map(|c| geo.from_origin(&c.into_owned())).collect())
}

/// Gradient with respect to `W` given partials with respect to the induced latents.
pub fn back_constraint_vjp(state: &LatentState, data: &ModelData, latent_grads: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let geo = state.geometry();
    let v = back_tangents(state, data)?;
    let bc = state.back.as_ref().expect("checked above");
    let mut gv = DMatrix::zeros(state.latent_dim, v.ncols());
    for (n, g) in latent_grads.iter().enumerate() {
        gv.set_column(n, &geo.from_origin_vjp(&v.column(n).into_owned(), g));
    }
    Ok(gv * data.bc_kernel(bc.lengthscale).as_ref())
}

/// Ridge least-squares weights reproducing the given latents through the back constraints.
pub fn fit_back_constraints(geo: &LatentGeometry, latents: &[DVector<f64>], data: &ModelData, ridge: f64) -> Result<DMatrix<f64>> {
    let n = latents.len();
    let mut k = data.bc_kernel(data.bc_lengthscale).into_owned();
    for i in 0..n {
        k[(i, i)] += ridge;
    }
    let mut targets = DMatrix::zeros(n, geo.dim);
    for (i, x) in latents.iter().enumerate() {
        targets.set_row(i, &geo.to_origin_chart(x).transpose());
    }
    let (_, chol) = factor_with_jitter(k, 0.0)?;
    Ok(chol.solve(&targets).transpose())
}
