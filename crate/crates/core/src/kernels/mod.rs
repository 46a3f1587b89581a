//! Squared-exponential kernels on `H^2`, `H^3` and Euclidean space, Gram assembly and the
//! spatial derivatives needed by the pullback metric.
//!
//! Hyperbolic kernels are functions of the geodesic distance `rho` only. Written as
//! functions of `c = cosh rho = -<x, z>_L` they are smooth at `c = 1`, which is how
//! their derivatives with respect to the ambient coordinates are expressed:
//! `dk/dx = (dk/dc) (-G z)`.

pub mod h2;
pub mod quadrature;

use std::sync::{Arc, Mutex};

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{raw, LorentzPoint};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Euclidean,
    Hyperbolic2,
    Hyperbolic3,
}

impl KernelKind {
    /// Kernel for hyperbolic latent spaces of dimension `d`.
    pub fn hyperbolic(d: usize) -> Result<Self> {
        match d {
            2 => Ok(Self::Hyperbolic2),
            3 => Ok(Self::Hyperbolic3),
            _ => Err(Error::UnsupportedDimension(d)),
        }
    }

    pub fn is_hyperbolic(self) -> bool {
        !matches!(self, Self::Euclidean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct KernelParams<T> {
    pub lengthscale: T,
    pub variance: T,
    #[serde(default = "default_jitter")]
    pub jitter: T,
    #[serde(default = "default_quadrature_tolerance")]
    pub quadrature_tolerance: T,
}

fn default_jitter<T: Real>() -> T {
    T::lit(1e-6)
}

fn default_quadrature_tolerance<T: Real>() -> T {
    T::lit(1e-7)
}

impl<T: Real> KernelParams<T> {
    pub fn new(lengthscale: T, variance: T) -> Result<Self> {
        let p = Self {
            lengthscale,
            variance,
            jitter: default_jitter(),
            quadrature_tolerance: default_quadrature_tolerance(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_jitter(mut self, jitter: T) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lengthscale > T::zero()
            && self.variance > T::zero()
            && self.jitter >= T::zero()
            && self.quadrature_tolerance > T::zero();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "kernel parameters must be positive (lengthscale {:?}, variance {:?}, jitter {:?})",
                self.lengthscale, self.variance, self.jitter
            )))
        }
    }
}

/// `sigma^2 (rho / sinh rho) exp(-rho^2 / (2 kappa^2))`.
pub fn h3_profile<T: Real>(rho: T, kappa: T, variance: T) -> T {
    variance * raw::rsinh(rho) * (-rho * rho / (T::lit(2.0) * kappa * kappa)).exp()
}

pub fn se_kernel_h3<T: Real>(x: &LorentzPoint<T>, z: &LorentzPoint<T>, p: &KernelParams<T>) -> T {
    debug_assert_eq!(x.dim(), 3);
    h3_profile(x.distance(z), p.lengthscale, p.variance)
}

/// `H^2` kernel by adaptive quadrature; `k(x, x) = sigma^2`.
pub fn se_kernel_h2(
    x: &LorentzPoint<f64>,
    z: &LorentzPoint<f64>,
    p: &KernelParams<f64>,
) -> Result<f64> {
    if x.dim() != 2 || z.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: x.dim().max(z.dim()) });
    }
    let rho = x.distance(z);
    if rho == 0.0 {
        return Ok(p.variance);
    }
    h2::kernel_value(rho, p.lengthscale, p.variance, p.quadrature_tolerance)
}

pub fn se_kernel_euclidean<T: Real>(x: &DVector<T>, z: &DVector<T>, p: &KernelParams<T>) -> T {
    let r2 = (x - z).norm_squared();
    p.variance * (-r2 / (T::lit(2.0) * p.lengthscale * p.lengthscale)).exp()
}

/// Kernel value and first derivatives at one pair.
#[derive(Clone, Copy, Debug, Default)]
pub struct KernelEval {
    pub k: f64,
    /// `dk/dc` with `c = cosh rho` (hyperbolic) or `dk/ds` with `s = |x - z|^2 / 2`.
    pub dk_darg: f64,
    pub dk_dlog_lengthscale: f64,
}

#[derive(Clone, Debug)]
enum Shape {
    Euclidean,
    H3,
    H2 { table: Arc<h2::H2Table>, f0: f64, f0_kappa: f64, f2: f64, f4: f64 },
}

const H2_CACHE_SIZE: usize = 8;

/// Recently built `H^2` tables, most recent last.
fn cached_h2_table(kappa: f64) -> Result<Arc<h2::H2Table>> {
    static CACHE: Mutex<Vec<Arc<h2::H2Table>>> = Mutex::new(Vec::new());
    let hit = CACHE.lock().unwrap_or_else(|e| e.into_inner()).iter().find(|t| t.kappa().to_bits() == kappa.to_bits()).cloned();
    if let Some(t) = hit {
        return Ok(t);
    }
    let table = Arc::new(h2::H2Table::build(kappa)?);
    let mut cache = CACHE.lock().unwrap_or_else(|e| e.into_inner());
    if cache.len() == H2_CACHE_SIZE {
        cache.remove(0);
    }
    cache.push(table.clone());
    Ok(table)
}

/// A kernel with fixed hyperparameters, prepared for repeated pair evaluation.
///
/// For `H^2` this holds a per-lengthscale interpolation table of the quadrature
/// integral and its derivatives.
#[derive(Clone, Debug)]
pub struct KernelProfile {
    kind: KernelKind,
    kappa: f64,
    variance: f64,
    shape: Shape,
}

impl KernelProfile {
    pub fn new(kind: KernelKind, p: &KernelParams<f64>) -> Result<Self> {
        p.validate()?;
        let shape = match kind {
            KernelKind::Euclidean => Shape::Euclidean,
            KernelKind::Hyperbolic3 => Shape::H3,
            KernelKind::Hyperbolic2 => {
                let table = cached_h2_table(p.lengthscale)?;
                let (f0, f0_kappa) = table.at_zero();
                let (f2, f4) = h2_even_coefficients(p.lengthscale);
                Shape::H2 { table, f0, f0_kappa, f2, f4 }
            }
        };
        Ok(Self { kind, kappa: p.lengthscale, variance: p.variance, shape })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn lengthscale(&self) -> f64 {
        self.kappa
    }

    /// Evaluation at geodesic (or Euclidean) distance `dist`.
    pub fn eval(&self, dist: f64) -> KernelEval {
        let (kappa, var) = (self.kappa, self.variance);
        let k2 = kappa * kappa;
        match &self.shape {
            Shape::Euclidean => {
                let k = var * (-dist * dist / (2.0 * k2)).exp();
                KernelEval { k, dk_darg: -k / k2, dk_dlog_lengthscale: k * dist * dist / k2 }
            }
            Shape::H3 => {
                let e = var * (-dist * dist / (2.0 * k2)).exp();
                let q = raw::rsinh(dist);
                let k = e * q;
                KernelEval {
                    k,
                    dk_darg: e * (raw::rsinh_prime_over_sinh(dist) - q * q / k2),
                    dk_dlog_lengthscale: k * dist * dist / k2,
                }
            }
            Shape::H2 { table, f0, f0_kappa, .. } => {
                let ev = table.eval(dist);
                let k = var * ev.f / f0;
                let dk_darg = if dist < 1e-8 {
                    var * table.second_derivative_at_zero() / f0
                } else {
                    var * ev.df_drho / (f0 * dist.sinh())
                };
                let dk_dkappa = var * (ev.df_dkappa / f0 - ev.f * f0_kappa / (f0 * f0));
                KernelEval { k, dk_darg, dk_dlog_lengthscale: kappa * dk_dkappa }
            }
        }
    }

    /// Kernel value between two points in the kernel's native coordinates.
    pub fn value(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        self.eval(self.distance(x, z)).k
    }

    pub fn distance(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        match self.kind {
            KernelKind::Euclidean => (x - z).norm(),
            _ => raw::distance(x, z),
        }
    }

    /// `(dphi/dc, d2phi/dc2)` at `c = 1` for hyperbolic kernels written as `phi(cosh rho)`.
    fn even_derivatives(&self) -> (f64, f64) {
        let var = self.variance;
        match &self.shape {
            Shape::Euclidean => (-var / (self.kappa * self.kappa), 0.0),
            Shape::H3 => {
                let k2 = self.kappa * self.kappa;
                let a = -1.0 / 6.0 - 1.0 / (2.0 * k2);
                let b = 7.0 / 360.0 + 1.0 / (12.0 * k2) + 1.0 / (8.0 * k2 * k2);
                (2.0 * a * var, 2.0 * var * (4.0 * b - a / 3.0))
            }
            Shape::H2 { f0, f2, f4, .. } => {
                let a = f2 / (2.0 * f0);
                let b = f4 / (24.0 * f0);
                (2.0 * a * var, 2.0 * var * (4.0 * b - a / 3.0))
            }
        }
    }

    /// Ambient partial derivative `dk(x, z)/dx`.
    pub fn grad_x(&self, x: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let ev = self.eval(self.distance(x, z));
        match self.kind {
            KernelKind::Euclidean => (x - z) * ev.dk_darg,
            _ => {
                let mut g = z * (-ev.dk_darg);
                g[0] = -g[0];
                g
            }
        }
    }

    /// `d^2 k(x, x') / dx dx'^T` at `x = x'`.
    pub fn cross_hessian_diag(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let (d1, d2) = self.even_derivatives();
        match self.kind {
            KernelKind::Euclidean => DMatrix::identity(n, n) * (-d1),
            _ => {
                let mut gx = x.clone();
                gx[0] = -gx[0];
                let mut g = DMatrix::identity(n, n);
                g[(0, 0)] = -1.0;
                &gx * gx.transpose() * d2 - g * d1
            }
        }
    }
}

/// `F''(0)` and `F''''(0)` of the `H^2` integral, from a polynomial fit of `F'(rho)` near 0.
fn h2_even_coefficients(kappa: f64) -> (f64, f64) {
    // F'(rho) = F2 rho + F4 rho^3 / 6 + F6 rho^5 / 120 + F8 rho^7 / 5040
    let h = 0.08 * kappa.min(1.0);
    let m = 4;
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for j in 0..m {
        let r = h * (j + 1) as f64;
        let fact = [1.0, 6.0, 120.0, 5040.0];
        for c in 0..m {
            a[(j, c)] = r.powi(2 * c as i32 + 1) / fact[c];
        }
        b[j] = h2::integral_with_derivatives(r, kappa)[1];
    }
    let sol = a.lu().solve(&b).expect("vandermonde-type system is nonsingular");
    (sol[0], sol[1])
}

/// Kernel matrix with `jitter * sigma^2` on the diagonal.
///
/// The jitter is escalated by a factor 10 up to three times if the matrix does not
/// admit a Cholesky factorization.
pub fn gram(points: &[DVector<f64>], p: &KernelParams<f64>, kind: KernelKind) -> Result<DMatrix<f64>> {
    let profile = KernelProfile::new(kind, p)?;
    gram_with_profile(points, &profile, p.jitter).map(|(k, _)| k)
}

/// Gram matrix and its Cholesky factor for a prepared profile.
pub fn gram_with_profile(
    points: &[DVector<f64>],
    profile: &KernelProfile,
    jitter: f64,
) -> Result<(DMatrix<f64>, Cholesky<f64, nalgebra::Dyn>)> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = profile.variance();
        for j in 0..i {
            let v = profile.value(&points[i], &points[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    factor_with_jitter(k, profile.variance() * jitter)
}

/// Adds `jitter` to the diagonal, escalating by 10x up to three times until Cholesky succeeds.
pub fn factor_with_jitter(
    k: DMatrix<f64>,
    jitter: f64,
) -> Result<(DMatrix<f64>, Cholesky<f64, nalgebra::Dyn>)> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel matrix".into()));
    }
    let mut j = jitter;
    for _ in 0..4 {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += j;
        }
        if let Some(ch) = Cholesky::new(m.clone()) {
            return Ok((m, ch));
        }
        j *= 10.0;
    }
    Err(Error::NotPositiveDefinite(format!(
        "kernel matrix of size {} after 3 jitter escalations",
        k.nrows()
    )))
}

/// `I_outputs (x) K`: the multi-output Gram with a kernel shared across outputs.
pub fn block_gram(k: &DMatrix<f64>, outputs: usize) -> DMatrix<f64> {
    DMatrix::<f64>::identity(outputs, outputs).kronecker(k)
}

/// Columns `dk(x*, x_n)/dx*` in ambient coordinates, `(D+1) x N` (or `D x N` for Euclidean).
pub fn kernel_grad(
    x_star: &DVector<f64>,
    points: &[DVector<f64>],
    p: &KernelParams<f64>,
    kind: KernelKind,
) -> Result<DMatrix<f64>> {
    let profile = KernelProfile::new(kind, p)?;
    Ok(kernel_grad_with_profile(x_star, points, &profile))
}

pub fn kernel_grad_with_profile(
    x_star: &DVector<f64>,
    points: &[DVector<f64>],
    profile: &KernelProfile,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x_star.len(), points.len());
    for (n, z) in points.iter().enumerate() {
        out.set_column(n, &profile.grad_x(x_star, z));
    }
    out
}

/// `d^2 k(x*, x*') / dx* dx*'^T` at `x* = x*'`.
pub fn kernel_hess_diag(x_star: &DVector<f64>, p: &KernelParams<f64>, kind: KernelKind) -> Result<DMatrix<f64>> {
    let profile = KernelProfile::new(kind, p)?;
    Ok(profile.cross_hessian_diag(x_star))
}
