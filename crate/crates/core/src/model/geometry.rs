//! Latent-space operations shared by the hyperbolic models and their Euclidean
//! baselines, with their derivatives.
//!
//! Hyperbolic points are ambient Lorentz coordinates (`D + 1` entries); Euclidean points
//! are plain `D`-vectors. All derivatives are ambient partials with respect to the
//! stored coordinates.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::KernelKind;
use crate::manifold::raw;
use crate::stats::log_rsinh;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Hyperbolic,
    Euclidean,
}

/// `G z` with `G = diag(-1, 1, .., 1)`.
#[inline]
pub(crate) fn flip(z: &DVector<f64>) -> DVector<f64> {
    let mut g = z.clone();
    g[0] = -g[0];
    g
}

/// `d/dc log(rho / sinh rho)` with `c = cosh rho`, finite at `rho = 0`.
#[inline]
pub(crate) fn dlog_rsinh_dc(rho: f64) -> f64 {
    if rho < 1e-3 {
        -1.0 / 3.0 + 7.0 * rho * rho / 90.0
    } else if rho > 350.0 {
        0.0
    } else {
        (1.0 / rho - 1.0 / rho.tanh()) / rho.sinh()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentGeometry {
    pub geometry: Geometry,
    /// Intrinsic latent dimension `D`.
    pub dim: usize,
}

impl LatentGeometry {
    pub fn new(geometry: Geometry, dim: usize) -> Self {
        Self { geometry, dim }
    }

    pub fn is_hyperbolic(&self) -> bool {
        self.geometry == Geometry::Hyperbolic
    }

    /// Length of a stored point.
    pub fn coord_len(&self) -> usize {
        match self.geometry {
            Geometry::Hyperbolic => self.dim + 1,
            Geometry::Euclidean => self.dim,
        }
    }

    pub fn kernel_kind(&self) -> Result<KernelKind> {
        match self.geometry {
            Geometry::Hyperbolic => KernelKind::hyperbolic(self.dim),
            Geometry::Euclidean => Ok(KernelKind::Euclidean),
        }
    }

    pub fn origin(&self) -> DVector<f64> {
        match self.geometry {
            Geometry::Hyperbolic => raw::origin(self.dim),
            Geometry::Euclidean => DVector::zeros(self.dim),
        }
    }

    pub fn distance(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        match self.geometry {
            Geometry::Hyperbolic => raw::distance(x, z),
            Geometry::Euclidean => (x - z).norm(),
        }
    }

    /// `d distance(x, z) / dx`; zero at coincident points.
    pub fn distance_grad(&self, x: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let d = self.distance(x, z);
        if d < 1e-12 {
            return DVector::zeros(x.len());
        }
        match self.geometry {
            Geometry::Hyperbolic => flip(z) * (-1.0 / d.sinh()),
            Geometry::Euclidean => (x - z) / d,
        }
    }

    /// `d (a - distance(x, z))^2 / dx`, smooth at `x = z` when `a = 0`.
    pub fn stress_term_grad(&self, x: &DVector<f64>, z: &DVector<f64>, a: f64) -> DVector<f64> {
        let d = self.distance(x, z);
        match self.geometry {
            Geometry::Hyperbolic => {
                // d/dc of (a - rho)^2 is -2 (a - rho) / sinh rho
                let coef = -2.0 * a / d.sinh().max(1e-12) + 2.0 * raw::rsinh(d);
                flip(z) * (-coef)
            }
            Geometry::Euclidean => {
                if d < 1e-12 {
                    if a == 0.0 {
                        return (x - z) * 2.0;
                    }
                    return DVector::zeros(x.len());
                }
                (x - z) * (-2.0 * (a - d) / d)
            }
        }
    }

    /// Step from `x` to `z` in local coordinates at `x`.
    pub fn step(&self, x: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        match self.geometry {
            Geometry::Hyperbolic => raw::to_local(x, &raw::log(x, z)),
            Geometry::Euclidean => z - x,
        }
    }

    /// Point reached from `x` by a local step.
    pub fn apply_step(&self, x: &DVector<f64>, local: &DVector<f64>) -> DVector<f64> {
        match self.geometry {
            Geometry::Hyperbolic => raw::exp(x, &raw::to_ambient(x, local)),
            Geometry::Euclidean => x + local,
        }
    }

    /// Vector-Jacobian product of [`Self::step`]: returns `(dL/dx, dL/dz)` for `dL/dstep = g`.
    pub fn step_vjp(&self, x: &DVector<f64>, z: &DVector<f64>, g: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match self.geometry {
            Geometry::Euclidean => (-g.clone(), g.clone()),
            Geometry::Hyperbolic => {
                let d = self.dim;
                let rho = raw::distance(x, z);
                let c = rho.cosh();
                let q = raw::rsinh(rho);
                let qp = raw::rsinh_prime_over_sinh(rho);
                let w = z - x * c;
                let u0 = q * w[0];
                let denom = 1.0 + x[0];
                let xs_dot_g: f64 = (0..d).map(|i| x[i + 1] * g[i]).sum();
                // gradient with respect to the ambient log
                let mut gu = DVector::zeros(d + 1);
                gu[0] = -xs_dot_g / denom;
                for i in 0..d {
                    gu[i + 1] = g[i];
                }
                // direct dependence of the local map on x
                let mut gx = DVector::zeros(d + 1);
                gx[0] = xs_dot_g * u0 / (denom * denom);
                for i in 0..d {
                    gx[i + 1] = -u0 * g[i] / denom;
                }
                let gamma = qp * gu.dot(&w) - q * gu.dot(x);
                gx += &gu * (-q * c) - flip(z) * gamma;
                let gz = &gu * q - flip(x) * gamma;
                (gx, gz)
            }
        }
    }

    /// `(D - 1) log(rho / sinh rho)` between consecutive points (zero for Euclidean).
    pub fn log_volume(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        match self.geometry {
            Geometry::Hyperbolic if self.dim > 1 => (self.dim - 1) as f64 * log_rsinh(raw::distance(x, z)),
            _ => 0.0,
        }
    }

    /// `(d/dx, d/dz)` of [`Self::log_volume`].
    pub fn log_volume_grad(&self, x: &DVector<f64>, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match self.geometry {
            Geometry::Hyperbolic if self.dim > 1 => {
                let coef = (self.dim - 1) as f64 * dlog_rsinh_dc(raw::distance(x, z));
                (flip(z) * (-coef), flip(x) * (-coef))
            }
            _ => (DVector::zeros(x.len()), DVector::zeros(z.len())),
        }
    }

    /// Log-density of the isotropic prior `N(mu_0, alpha I)` (wrapped for hyperbolic).
    pub fn isotropic_log_prior(&self, x: &DVector<f64>, alpha: f64) -> f64 {
        let d = self.dim as f64;
        let norm = -0.5 * d * (2.0 * std::f64::consts::PI * alpha).ln();
        match self.geometry {
            Geometry::Hyperbolic => {
                let rho = raw::distance(&raw::origin(self.dim), x);
                norm - rho * rho / (2.0 * alpha) + (d - 1.0) * log_rsinh(rho)
            }
            Geometry::Euclidean => norm - x.norm_squared() / (2.0 * alpha),
        }
    }

    pub fn isotropic_log_prior_grad(&self, x: &DVector<f64>, alpha: f64) -> DVector<f64> {
        match self.geometry {
            Geometry::Hyperbolic => {
                // a function of c = x_0
                let rho = raw::distance(&raw::origin(self.dim), x);
                let d = self.dim as f64;
                let dc = -raw::rsinh(rho) / alpha + (d - 1.0) * dlog_rsinh_dc(rho);
                let mut g = DVector::zeros(x.len());
                g[0] = dc;
                g
            }
            Geometry::Euclidean => -x / alpha,
        }
    }

    /// Points at uniform fractions of the geodesic (or segment) from `a` to `b`.
    pub fn interpolate(&self, a: &DVector<f64>, b: &DVector<f64>, count: usize) -> Vec<DVector<f64>> {
        (0..count)
            .map(|i| {
                let t = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
                match self.geometry {
                    Geometry::Hyperbolic => raw::geodesic_point(a, b, t),
                    Geometry::Euclidean => a + (b - a) * t,
                }
            })
            .collect()
    }

    /// Local tangent coordinates at the origin of a point (inverse of [`Self::from_origin`]).
    pub fn to_origin_chart(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.geometry {
            Geometry::Hyperbolic => {
                let o = raw::origin(self.dim);
                raw::to_local(&o, &raw::log(&o, x))
            }
            Geometry::Euclidean => x.clone(),
        }
    }

    /// `Exp_{mu_0}((0, v))`, or `v` itself for Euclidean.
    pub fn from_origin(&self, v: &DVector<f64>) -> DVector<f64> {
        match self.geometry {
            Geometry::Hyperbolic => {
                let r = v.norm();
                let mut x = DVector::zeros(self.dim + 1);
                x[0] = r.cosh();
                let s = raw::sinhc(r);
                for i in 0..self.dim {
                    x[i + 1] = s * v[i];
                }
                x
            }
            Geometry::Euclidean => v.clone(),
        }
    }

    /// Vector-Jacobian product of [`Self::from_origin`].
    pub fn from_origin_vjp(&self, v: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        match self.geometry {
            Geometry::Hyperbolic => {
                let r = v.norm();
                let s = raw::sinhc(r);
                // (sinhc)'(r) / r, series 1/3 + r^2/30 near 0
                let sp_over_r = if r < 1e-3 { 1.0 / 3.0 + r * r / 30.0 } else { (r * r.cosh() - r.sinh()) / (r * r * r) };
                let gs = DVector::from_fn(self.dim, |i, _| g[i + 1]);
                let vg = v.dot(&gs);
                v * (g[0] * s) + gs * s + v * (vg * sp_over_r)
            }
            Geometry::Euclidean => g.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::LorentzPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_point(rng: &mut ChaCha8Rng, d: usize, s: f64) -> DVector<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-s..s)).collect();
        LorentzPoint::from_spatial(&v).into_coords()
    }

    /// Directional derivatives along on-manifold curves `Exp_x(h V e_i)`.
    fn fd_local<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>) -> DVector<f64> {
        let d = x.len() - 1;
        let h = 1e-5;
        DVector::from_fn(d, |i, _| {
            let mut e = DVector::zeros(d);
            e[i] = h;
            let xp = raw::exp(x, &raw::to_ambient(x, &e));
            let xm = raw::exp(x, &raw::to_ambient(x, &(-e)));
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
    }

    fn local_of(x: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        raw::basis(x).transpose() * g
    }

    #[test]
    fn step_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in [2, 3] {
            let geo = LatentGeometry::new(Geometry::Hyperbolic, d);
            for scale in [0.05, 1.0] {
                let x = rand_point(&mut rng, d, 1.0);
                let dir = DVector::from_fn(d, |_, _| rng.random_range(-scale..scale));
                let z = geo.apply_step(&x, &dir);
                let g = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
                let (gx, gz) = geo.step_vjp(&x, &z, &g);
                let fx = fd_local(|p| geo.step(p, &z).dot(&g), &x);
                let fz = fd_local(|p| geo.step(&x, p).dot(&g), &z);
                assert!((local_of(&x, &gx) - &fx).norm() < 1e-6 * fx.norm().max(1.0), "{d} {scale}");
                assert!((local_of(&z, &gz) - &fz).norm() < 1e-6 * fz.norm().max(1.0), "{d} {scale}");
            }
        }
    }

    #[test]
    fn coincident_step_gradient_is_finite() {
        let geo = LatentGeometry::new(Geometry::Hyperbolic, 2);
        let x = LorentzPoint::from_spatial(&[0.3, 0.4]).into_coords();
        let g = DVector::from_vec(vec![1.0, -2.0]);
        let (gx, gz) = geo.step_vjp(&x, &x, &g);
        // step(x, z) ~ V^T G (z - x) near z = x
        assert!((local_of(&x, &gz) - &g).norm() < 1e-9);
        assert!((local_of(&x, &gx) + &g).norm() < 1e-9);
    }

    #[test]
    fn volume_and_prior_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for d in [2, 3] {
            let geo = LatentGeometry::new(Geometry::Hyperbolic, d);
            let x = rand_point(&mut rng, d, 1.0);
            let z = rand_point(&mut rng, d, 1.0);
            let (gx, gz) = geo.log_volume_grad(&x, &z);
            let fx = fd_local(|p| geo.log_volume(p, &z), &x);
            let fz = fd_local(|p| geo.log_volume(&x, p), &z);
            assert!((local_of(&x, &gx) - fx).norm() < 1e-7);
            assert!((local_of(&z, &gz) - fz).norm() < 1e-7);
            let gp = geo.isotropic_log_prior_grad(&x, 0.7);
            let fp = fd_local(|p| geo.isotropic_log_prior(p, 0.7), &x);
            assert!((local_of(&x, &gp) - fp).norm() < 1e-7);
            for a in [0.0, 1.5] {
                let gs = geo.stress_term_grad(&x, &z, a);
                let fs = fd_local(|p| (a - geo.distance(p, &z)).powi(2), &x);
                assert!((local_of(&x, &gs) - fs).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn origin_chart_round_trip_and_vjp() {
        let geo = LatentGeometry::new(Geometry::Hyperbolic, 3);
        let v = DVector::from_vec(vec![0.4, -0.2, 0.9]);
        let x = geo.from_origin(&v);
        assert!((raw::minkowski(&x, &x) + 1.0).abs() < 1e-12);
        assert!((geo.to_origin_chart(&x) - &v).norm() < 1e-12);
        let g = DVector::from_vec(vec![0.3, 1.0, -0.5, 0.2]);
        let an = geo.from_origin_vjp(&v, &g);
        let h = 1e-6;
        for i in 0..3 {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[i] += h;
            vm[i] -= h;
            let fd = (geo.from_origin(&vp).dot(&g) - geo.from_origin(&vm).dot(&g)) / (2.0 * h);
            assert!((an[i] - fd).abs() < 1e-8);
        }
        let zero = DVector::zeros(3);
        assert_eq!(geo.from_origin(&zero), raw::origin(3));
    }

    #[test]
    fn interpolation_is_evenly_spaced() {
        let geo = LatentGeometry::new(Geometry::Hyperbolic, 2);
        let a = LorentzPoint::from_spatial(&[-1.0, 0.2]).into_coords();
        let b = LorentzPoint::from_spatial(&[1.5, 0.7]).into_coords();
        let pts = geo.interpolate(&a, &b, 12);
        let steps: Vec<f64> = pts.windows(2).map(|w| geo.distance(&w[0], &w[1])).collect();
        for s in &steps {
            assert!((s - steps[0]).abs() < 1e-6);
        }
        assert!((pts[11].clone() - b).norm() < 1e-9);
    }
}
