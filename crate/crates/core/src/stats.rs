//! Wrapped Gaussian distribution on the Lorentz model.
//!
//! The distribution is the pushforward of `N(0, S)` on the tangent space at the mean,
//! through the exponential map. `S` is always held in local coordinates (`D x D`).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::manifold::{raw, LorentzPoint};
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct WrappedGaussian<T: Real> {
    mean: LorentzPoint<T>,
    cov_local: DMatrix<T>,
    chol: Cholesky<T, Dyn>,
}

impl<T: Real> WrappedGaussian<T> {
    pub fn new(mean: LorentzPoint<T>, cov_local: DMatrix<T>) -> Result<Self> {
        let d = mean.dim();
        if cov_local.nrows() != d || cov_local.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: cov_local.nrows() });
        }
        let asym = (&cov_local - cov_local.transpose()).amax();
        if asym > T::lit(1e-10) * T::one().max(cov_local.amax()) {
            return Err(Error::NotPositiveDefinite("covariance is not symmetric".into()));
        }
        let chol = Cholesky::new(cov_local.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("covariance Cholesky failed".into()))?;
        Ok(Self { mean, cov_local, chol })
    }

    /// `N_H(mean, variance * I)`.
    pub fn isotropic(mean: LorentzPoint<T>, variance: T) -> Result<Self> {
        let d = mean.dim();
        Self::new(mean, DMatrix::identity(d, d) * variance)
    }

    pub fn mean(&self) -> &LorentzPoint<T> {
        &self.mean
    }

    pub fn cov_local(&self) -> &DMatrix<T> {
        &self.cov_local
    }

    /// Log-density with respect to the hyperbolic volume measure.
    pub fn log_density(&self, x: &LorentzPoint<T>) -> Result<T> {
        if x.dim() != self.mean.dim() {
            return Err(Error::DimensionMismatch { expected: self.mean.dim(), got: x.dim() });
        }
        let u = raw::log(self.mean.coords(), x.coords());
        let local = raw::to_local(self.mean.coords(), &u);
        let rho = local.norm();
        Ok(self.log_gaussian_local(&local) + log_volume_factor(rho, self.mean.dim()))
    }

    /// Euclidean Gaussian log-density of a local tangent vector.
    pub fn log_gaussian_local(&self, local: &DVector<T>) -> T {
        let d = local.len();
        let solved = self.chol.l().solve_lower_triangular(local).expect("triangular solve");
        let logdet = self.chol.l().diagonal().iter().fold(T::zero(), |acc, v| acc + v.ln());
        let half = T::lit(0.5);
        -half * solved.norm_squared() - logdet - half * T::lit(d as f64) * T::two_pi().ln()
    }

    /// Draws `n` points. Deterministic for a given generator state.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<LorentzPoint<T>>
    where
        StandardNormal: Distribution<T>,
    {
        let d = self.mean.dim();
        (0..n)
            .map(|_| {
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
                let local = self.chol.l() * z;
                let u = raw::to_ambient(self.mean.coords(), &local);
                LorentzPoint::from_coords_unchecked(raw::exp(self.mean.coords(), &u))
            })
            .collect()
    }
}

/// `(D - 1) log(rho / sinh rho)`, the log change of volume of the exponential map.
pub fn log_volume_factor<T: Real>(rho: T, dim: usize) -> T {
    if dim <= 1 {
        return T::zero();
    }
    T::lit((dim - 1) as f64) * log_rsinh(rho)
}

/// `log(r / sinh r)` without overflow for large `r`.
pub fn log_rsinh<T: Real>(r: T) -> T {
    let r = r.abs();
    if r < T::lit(1e-4) {
        -r * r / T::lit(6.0)
    } else if r > T::lit(20.0) {
        // sinh r = e^r (1 - e^{-2r}) / 2
        r.ln() - r + T::lit(2.0).ln() - (T::one() - (-T::lit(2.0) * r).exp()).ln()
    } else {
        (r / r.sinh()).ln()
    }
}

/// Change of volume `r_t = (rho / sinh rho)^(D-1)` between consecutive latent points.
pub fn volume_factor<T: Real>(x_t: &LorentzPoint<T>, x_next: &LorentzPoint<T>) -> Result<T> {
    if x_t.dim() != x_next.dim() {
        return Err(Error::DimensionMismatch { expected: x_t.dim(), got: x_next.dim() });
    }
    let rho = x_t.distance(x_next);
    Ok(log_volume_factor(rho, x_t.dim()).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn density_at_mean_identity_covariance() {
        for d in [2, 3] {
            let g = WrappedGaussian::isotropic(LorentzPoint::<f64>::origin(d), 1.0).unwrap();
            let v = g.log_density(&LorentzPoint::origin(d)).unwrap();
            assert!((v + 0.5 * d as f64 * (2.0 * PI).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn density_factorizes() {
        // Euclidean Gaussian of the local log times r^(D-1), composed by hand
        let mean = LorentzPoint::<f64>::from_spatial(&[0.4, -0.3]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let g = WrappedGaussian::new(mean.clone(), cov.clone()).unwrap();
        let x = LorentzPoint::from_spatial(&[-0.5, 0.9]);
        let u = raw::log(mean.coords(), x.coords());
        let l = raw::to_local(mean.coords(), &u);
        let inv = cov.clone().try_inverse().unwrap();
        let q = (l.transpose() * inv * &l)[0];
        let gauss = (-0.5 * q).exp() / (2.0 * PI * cov.determinant().sqrt());
        let rho = mean.distance(&x);
        let expected = gauss * rho / rho.sinh();
        assert!((g.log_density(&x).unwrap().exp() - expected).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_covariances() {
        let o = LorentzPoint::<f64>::origin(2);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(WrappedGaussian::new(o.clone(), asym).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(WrappedGaussian::new(o, neg).is_err());
    }

    #[test]
    fn degenerate_samples_collapse() {
        let mean = LorentzPoint::<f64>::from_spatial(&[0.2, 0.1]);
        let g = WrappedGaussian::isotropic(mean.clone(), 1e-18).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in g.sample(100, &mut rng) {
            assert!((p.coords() - mean.coords()).norm() < 1e-8);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let g = WrappedGaussian::isotropic(LorentzPoint::<f64>::origin(3), 0.5).unwrap();
        let a = g.sample(10, &mut ChaCha8Rng::seed_from_u64(4));
        let b = g.sample(10, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_moments() {
        let mean = LorentzPoint::<f64>::from_spatial(&[0.5, -0.2]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.3, 0.08, 0.08, 0.2]);
        let g = WrappedGaussian::new(mean.clone(), cov.clone()).unwrap();
        let n = 100_000;
        let samples = g.sample(n, &mut ChaCha8Rng::seed_from_u64(7));
        let mut sum = DVector::zeros(2);
        let mut outer = DMatrix::zeros(2, 2);
        for s in &samples {
            let l = raw::to_local(mean.coords(), &raw::log(mean.coords(), s.coords()));
            outer += &l * l.transpose();
            sum += l;
        }
        let m = sum / n as f64;
        for i in 0..2 {
            let sd = cov[(i, i)].sqrt();
            assert!(m[i].abs() < 3.0 * sd / (n as f64).sqrt());
        }
        let emp = outer / n as f64 - &m * m.transpose();
        for i in 0..2 {
            for j in 0..2 {
                let scale = (cov[(i, i)] * cov[(j, j)]).sqrt();
                assert!((emp[(i, j)] - cov[(i, j)]).abs() < 0.05 * scale);
            }
        }
    }

    #[test]
    fn volume_factor_values() {
        let x = LorentzPoint::<f64>::from_spatial(&[0.1, 0.3]);
        assert_eq!(volume_factor(&x, &x).unwrap(), 1.0);
        let o = LorentzPoint::<f64>::origin(2);
        let z = LorentzPoint::from_spatial(&[1f64.sinh(), 0.0]);
        assert!((volume_factor(&o, &z).unwrap() - 1.0 / 1f64.sinh()).abs() < 1e-12);
        let mut last = 1.0;
        for k in 1..60 {
            let t = k as f64 * 0.25;
            let z = LorentzPoint::from_spatial(&[t.sinh(), 0.0]);
            let v = volume_factor(&o, &z).unwrap();
            assert!(v < last && v > 0.0);
            last = v;
        }
    }

    #[test]
    fn log_rsinh_branches_agree() {
        for r in [1e-5, 1e-4, 0.5, 19.99, 20.0, 20.01, 40.0] {
            let direct = (r / f64::sinh(r)).ln();
            assert!((log_rsinh(r) - direct).abs() < 1e-10, "{r}");
        }
    }
}
