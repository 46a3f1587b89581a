//! GP posteriors of a trained model: the observation map `x -> y` and the latent
//! dynamics `x_t -> step`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::geometry::LatentGeometry;
use super::objective::ModelData;
use super::LatentState;
use crate::error::{Error, Result};
use crate::kernels::{factor_with_jitter, KernelProfile};

/// Posterior of the latent-to-observation GP with one kernel shared by all outputs.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    profile: KernelProfile,
    points: Vec<DVector<f64>>,
    chol: Cholesky<f64, Dyn>,
    /// `(K + sigma_y^2 I)^{-1} Y`, `N x D_y`.
    alpha: DMatrix<f64>,
    noise: f64,
}

impl GpPosterior {
    pub fn new(profile: KernelProfile, points: Vec<DVector<f64>>, y: &DMatrix<f64>, noise: f64, jitter: f64) -> Result<Self> {
        if y.nrows() != points.len() {
            return Err(Error::DimensionMismatch { expected: points.len(), got: y.nrows() });
        }
        let n = points.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = profile.variance() + noise;
            for j in 0..i {
                let v = profile.value(&points[i], &points[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let (_, chol) = factor_with_jitter(k, profile.variance() * jitter)?;
        let alpha = chol.solve(y);
        Ok(Self { profile, points, chol, alpha, noise })
    }

    pub fn from_state(state: &LatentState, data: &ModelData) -> Result<Self> {
        Self::new(state.profile_y()?, state.latents.clone(), &data.y, state.hyper.noise_y, state.hyper.kernel_y.jitter)
    }

    pub fn output_dim(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn profile(&self) -> &KernelProfile {
        &self.profile
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    fn cross(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.points.len(), self.points.iter().map(|p| self.profile.value(x, p)))
    }

    /// Posterior mean and predictive variance (identical across outputs) at `x`.
    pub fn predict(&self, x: &DVector<f64>) -> (DVector<f64>, f64) {
        let ks = self.cross(x);
        let mean = self.alpha.tr_mul(&ks);
        let v = self.chol.solve(&ks);
        let var = (self.profile.variance() - ks.dot(&v)).max(0.0) + self.noise;
        (mean, var)
    }

    /// `d mean / dx`: column `d` is the ambient gradient of output `d`.
    pub fn mean_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.kernel_grads(x) * &self.alpha
    }

    /// Ambient columns `dk(x, x_n)/dx`.
    fn kernel_grads(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(x.len(), self.points.len());
        for (n, p) in self.points.iter().enumerate() {
            g.set_column(n, &self.profile.grad_x(x, p));
        }
        g
    }

    /// Covariance of the Jacobian rows: `d2k(x, x) - dk K^{-1} dk^T`.
    pub fn jacobian_covariance(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let g = self.kernel_grads(x);
        let s = self.chol.solve(&g.transpose());
        self.profile.cross_hessian_diag(x) - &g * s
    }
}

/// Posterior means and variances (`M x D_y` each) at the given latent points.
pub fn decode(state: &LatentState, data: &ModelData, xs: &[DVector<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let post = GpPosterior::from_state(state, data)?;
    let dy = post.output_dim();
    let mut mean = DMatrix::zeros(xs.len(), dy);
    let mut var = DMatrix::zeros(xs.len(), dy);
    for (i, x) in xs.iter().enumerate() {
        let (m, v) = post.predict(x);
        mean.set_row(i, &m.transpose());
        var.row_mut(i).fill(v);
    }
    Ok((mean, var))
}

/// Posterior of the dynamics GP mapping a point to the local step leaving it.
#[derive(Clone, Debug)]
pub struct DynamicsPosterior {
    geo: LatentGeometry,
    profile: KernelProfile,
    sources: Vec<DVector<f64>>,
    chols: Vec<Cholesky<f64, Dyn>>,
    betas: Vec<DVector<f64>>,
    noise: Vec<f64>,
}

impl DynamicsPosterior {
    pub fn from_state(state: &LatentState, data: &ModelData) -> Result<Self> {
        let geo = state.geometry();
        let trans = data.transitions();
        if trans.is_empty() {
            return Err(Error::InvalidArgument("model has no transitions".into()));
        }
        let profile = state.profile_x()?;
        let sources: Vec<DVector<f64>> = trans.iter().map(|&(s, _)| state.latents[s].clone()).collect();
        let m = sources.len();
        let mut k = DMatrix::zeros(m, m);
        for i in 0..m {
            k[(i, i)] = profile.variance();
            for j in 0..i {
                let v = profile.value(&sources[i], &sources[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let mut chols = Vec::new();
        let mut betas = Vec::new();
        for d in 0..state.latent_dim {
            let mut c = k.clone();
            for i in 0..m {
                c[(i, i)] += state.hyper.noise_x[d];
            }
            let (_, chol) = factor_with_jitter(c, profile.variance() * state.hyper.kernel_x.jitter)?;
            let u = DVector::from_iterator(m, trans.iter().map(|&(s, t)| geo.step(&state.latents[s], &state.latents[t])[d]));
            betas.push(chol.solve(&u));
            chols.push(chol);
        }
        Ok(Self { geo, profile, sources, chols, betas, noise: state.hyper.noise_x.clone() })
    }

    pub fn geometry(&self) -> LatentGeometry {
        self.geo
    }

    /// Mean and variance per latent dimension of the local step from `x`, noise included.
    pub fn predict_step(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let ks = DVector::from_iterator(self.sources.len(), self.sources.iter().map(|s| self.profile.value(x, s)));
        let d = self.betas.len();
        let mean = DVector::from_fn(d, |i, _| ks.dot(&self.betas[i]));
        let var = DVector::from_fn(d, |i, _| {
            (self.profile.variance() - ks.dot(&self.chols[i].solve(&ks))).max(0.0) + self.noise[i]
        });
        (mean, var)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Hyperparameters, LossWeights, ModelKind};
    use super::*;
    use crate::data::{Dataset, TaxonomyGraph};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: ModelKind, noise: f64, seed: u64) -> (LatentState, ModelData) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = TaxonomyGraph::binary_tree(2);
        let trajs = vec![DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0)), DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0))];
        let mut ds = Dataset::new(trajs, vec!["root".into(); 2], vec!["root.0".into(), "root.1".into()]).unwrap();
        ds.center();
        let data = ModelData::new(&ds, &g).unwrap();
        let geo = LatentGeometry::new(kind.geometry(), 2);
        let latents = (0..9).map(|_| geo.from_origin(&DVector::from_fn(2, |_, _| rng.random_range(-1.5..1.5)))).collect();
        let mut hyper = Hyperparameters::initial(2);
        hyper.noise_y = noise;
        hyper.kernel_y.jitter = 0.0;
        hyper.kernel_y.lengthscale = 0.7;
        let s = LatentState { kind, latent_dim: 2, latents, hyper, back: None, weights: LossWeights::default(), alpha: 1.0 };
        (s, data)
    }

    #[test]
    fn interpolates_training_points() {
        let (s, data) = setup(ModelKind::Gphdm, 1e-10, 1);
        let (m, v) = decode(&s, &data, &s.latents).unwrap();
        assert!((m - &data.y).amax() < 1e-4);
        assert!(v.iter().all(|&x| x >= 1e-10 - 1e-9));
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let (s, data) = setup(ModelKind::Gphlvm, 0.01, 2);
        let far = s.geometry().from_origin(&DVector::from_vec(vec![12.0, 0.0]));
        let (m, v) = decode(&s, &data, &[far]).unwrap();
        assert!(m.amax() < 1e-8);
        assert!((v[(0, 0)] - (1.0 + 0.01)).abs() < 1e-8);
    }

    #[test]
    fn matches_dense_conditioning() {
        for kind in [ModelKind::Gplvm, ModelKind::Gphdm] {
            let (s, data) = setup(kind, 0.05, 3);
            let p = s.profile_y().unwrap();
            let n = 9;
            let k = DMatrix::from_fn(n, n, |i, j| p.value(&s.latents[i], &s.latents[j]) + if i == j { 0.05 } else { 0.0 });
            let inv = k.try_inverse().unwrap();
            let x = s.geometry().from_origin(&DVector::from_vec(vec![0.3, -0.2]));
            let ks = DVector::from_fn(n, |i, _| p.value(&x, &s.latents[i]));
            let mean = data.y.transpose() * &inv * &ks;
            let var = 1.0 - (ks.transpose() * &inv * &ks)[0] + 0.05;
            let (m, v) = decode(&s, &data, &[x]).unwrap();
            assert!((m.row(0).transpose() - mean).amax() < 1e-10);
            assert!((v[(0, 1)] - var).abs() < 1e-10);
        }
    }

    #[test]
    fn mean_jacobian_matches_finite_differences() {
        let (s, data) = setup(ModelKind::Gphdm, 0.01, 4);
        let post = GpPosterior::from_state(&s, &data).unwrap();
        let geo = s.geometry();
        let x = geo.from_origin(&DVector::from_vec(vec![0.2, 0.4]));
        let jac = post.mean_jacobian(&x);
        let basis = crate::manifold::raw::basis(&x);
        let h = 1e-5;
        for e in 0..2 {
            let mut dir = DVector::zeros(2);
            dir[e] = h;
            let fd = (post.predict(&geo.apply_step(&x, &dir)).0 - post.predict(&geo.apply_step(&x, &(-dir))).0) / (2.0 * h);
            let an = jac.transpose() * basis.column(e);
            assert!((an - &fd).norm() < 1e-6 * fd.norm().max(1.0));
        }
    }

    #[test]
    fn euclidean_dynamics_posterior_is_gp_regression() {
        let (s, data) = setup(ModelKind::Gpdm, 0.01, 5);
        let dp = DynamicsPosterior::from_state(&s, &data).unwrap();
        let x = DVector::from_vec(vec![0.1, 0.2]);
        let trans = data.transitions();
        let p = s.profile_x().unwrap();
        let m = trans.len();
        let k = DMatrix::from_fn(m, m, |i, j| p.value(&s.latents[trans[i].0], &s.latents[trans[j].0]));
        let ks = DVector::from_fn(m, |i, _| p.value(&x, &s.latents[trans[i].0]));
        let (mean, var) = dp.predict_step(&x);
        for d in 0..2 {
            let c = &k + DMatrix::identity(m, m) * (s.hyper.noise_x[d] + 1e-6);
            let u = DVector::from_fn(m, |i, _| s.latents[trans[i].1][d] - s.latents[trans[i].0][d]);
            let inv = c.try_inverse().unwrap();
            assert!((mean[d] - (ks.transpose() * &inv * u)[0]).abs() < 1e-9);
            assert!((var[d] - (1.0 - (ks.transpose() * &inv * &ks)[0] + s.hyper.noise_x[d])).abs() < 1e-9);
        }
    }
}
