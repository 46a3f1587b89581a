//! Lorentz (hyperboloid) model of hyperbolic space with curvature −1.
//!
//! Points live in ambient `R^{D+1}` and satisfy `<x, x>_L = -1`, `x_0 > 0`, where
//! `<x, y>_L = -x_0 y_0 + sum_i x_i y_i`. Tangent vectors at `x` are ambient vectors
//! Lorentz-orthogonal to `x`; they can also be carried in intrinsic local coordinates
//! with respect to the basis obtained by parallel transport of the canonical basis
//! `e_1..e_D` at the origin `mu_0 = (1, 0, .., 0)`.
//!
//! The [`raw`] submodule works on plain `DVector`s and is what the model code uses in
//! hot loops. The typed API on top ([`LorentzPoint`], [`TangentVector`],
//! [`TangentBasis`]) validates its inputs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Coordinate-level operations. Inputs are assumed to be valid points/tangents.
pub mod raw {
    use super::*;

    /// Below this norm a tangent vector is treated as zero.
    pub(crate) fn zero_norm<T: Real>() -> T {
        T::lit(1e-12)
    }

    #[inline]
    pub fn minkowski<T: Real>(x: &DVector<T>, y: &DVector<T>) -> T {
        debug_assert_eq!(x.len(), y.len());
        let mut acc = -x[0] * y[0];
        for i in 1..x.len() {
            acc += x[i] * y[i];
        }
        acc
    }

    /// `sinh(r) / r`, finite at `r = 0`.
    #[inline]
    pub fn sinhc<T: Real>(r: T) -> T {
        if r.abs() < T::lit(1e-4) {
            let r2 = r * r;
            T::one() + r2 / T::lit(6.0) + r2 * r2 / T::lit(120.0)
        } else {
            r.sinh() / r
        }
    }

    /// `r / sinh(r)`, finite at `r = 0`.
    #[inline]
    pub fn rsinh<T: Real>(r: T) -> T {
        if r > T::lit(700.0) {
            // sinh overflows in f64 long before r/sinh r stops being representable as 0
            return T::zero();
        }
        T::one() / sinhc(r)
    }

    /// `d/dr (r / sinh r) / sinh r`, finite at `r = 0` (limit −1/3).
    #[inline]
    pub fn rsinh_prime_over_sinh<T: Real>(r: T) -> T {
        if r.abs() < T::lit(1e-3) {
            let r2 = r * r;
            T::lit(-1.0 / 3.0) + T::lit(2.0 / 15.0) * r2
        } else if r > T::lit(350.0) {
            T::zero()
        } else {
            let s = r.sinh();
            (s - r * r.cosh()) / (s * s * s)
        }
    }

    /// `-<x, z>_L` clamped to `>= 1`.
    #[inline]
    pub fn cosh_dist<T: Real>(x: &DVector<T>, z: &DVector<T>) -> T {
        (-minkowski(x, z)).max(T::one())
    }

    pub fn distance<T: Real>(x: &DVector<T>, z: &DVector<T>) -> T {
        let c = -minkowski(x, z);
        if c < T::lit(1.5) {
            // 2 asinh(|x - z|_L / 2) is exact where acosh(c) loses half the digits.
            let diff = x - z;
            let sq = minkowski(&diff, &diff).max(T::zero());
            T::lit(2.0) * (sq.sqrt() / T::lit(2.0)).asinh()
        } else {
            c.acosh()
        }
    }

    /// Lorentz norm of a tangent vector.
    #[inline]
    pub fn tangent_norm<T: Real>(u: &DVector<T>) -> T {
        minkowski(u, u).max(T::zero()).sqrt()
    }

    /// Restores `x_0 = sqrt(1 + |x_s|^2)` from the spatial coordinates.
    pub fn renormalize<T: Real>(x: &mut DVector<T>) {
        let mut s = T::one();
        for i in 1..x.len() {
            s += x[i] * x[i];
        }
        x[0] = s.sqrt();
    }

    pub fn exp<T: Real>(x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let n = tangent_norm(u);
        if n < zero_norm() {
            return x.clone();
        }
        let mut out = x * n.cosh() + u * sinhc(n);
        renormalize(&mut out);
        out
    }

    pub fn log<T: Real>(x: &DVector<T>, z: &DVector<T>) -> DVector<T> {
        let rho = distance(x, z);
        if rho < zero_norm() {
            return DVector::zeros(x.len());
        }
        let c = -minkowski(x, z);
        let mut u = (z - x * c) * rsinh(rho);
        // remove the round-off component along x
        let along = minkowski(x, &u);
        u += x * along;
        u
    }

    pub fn transport<T: Real>(x: &DVector<T>, z: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let denom = T::one() - minkowski(x, z);
        let coef = minkowski(z, u) / denom;
        u + (x + z) * coef
    }

    /// Minkowski-orthogonal projection onto the tangent space: `w + <x, w>_L x`.
    pub fn tangent_proj<T: Real>(x: &DVector<T>, w: &DVector<T>) -> DVector<T> {
        w + x * minkowski(x, w)
    }

    /// Riemannian gradient from ambient partial derivatives: `(G + x x^T) g`.
    pub fn riemannian_grad<T: Real>(x: &DVector<T>, g: &DVector<T>) -> DVector<T> {
        let mut out = g.clone();
        out[0] = -out[0];
        out + x * x.dot(g)
    }

    /// Local coordinates `V_x^T G u` of an ambient tangent vector.
    pub fn to_local<T: Real>(x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let d = x.len() - 1;
        let f = u[0] / (T::one() + x[0]);
        DVector::from_fn(d, |i, _| u[i + 1] - x[i + 1] * f)
    }

    /// Ambient tangent vector `V_x l` from local coordinates.
    pub fn to_ambient<T: Real>(x: &DVector<T>, l: &DVector<T>) -> DVector<T> {
        let d = x.len() - 1;
        let mut dot = T::zero();
        for i in 0..d {
            dot += x[i + 1] * l[i];
        }
        let f = dot / (T::one() + x[0]);
        let mut out = DVector::zeros(d + 1);
        out[0] = f * (T::one() + x[0]);
        for i in 0..d {
            out[i + 1] = l[i] + f * x[i + 1];
        }
        out
    }

    /// Basis matrix `V_x` with columns `Gamma_{mu0 -> x}(e_i)`.
    pub fn basis<T: Real>(x: &DVector<T>) -> DMatrix<T> {
        let d = x.len() - 1;
        let mut v = DMatrix::zeros(d + 1, d);
        let f = T::one() / (T::one() + x[0]);
        for j in 0..d {
            let c = x[j + 1] * f;
            v[(0, j)] = c * (T::one() + x[0]);
            for i in 0..d {
                v[(i + 1, j)] = c * x[i + 1];
            }
            v[(j + 1, j)] += T::one();
        }
        v
    }

    pub fn origin<T: Real>(d: usize) -> DVector<T> {
        let mut o = DVector::zeros(d + 1);
        o[0] = T::one();
        o
    }

    pub fn poincare<T: Real>(x: &DVector<T>) -> DVector<T> {
        let d = x.len() - 1;
        let f = T::one() / (T::one() + x[0]);
        DVector::from_fn(d, |i, _| x[i + 1] * f)
    }

    /// Point on the geodesic from `a` to `b` at fraction `t`.
    pub fn geodesic_point<T: Real>(a: &DVector<T>, b: &DVector<T>, t: T) -> DVector<T> {
        let u = log(a, b);
        exp(a, &(u * t))
    }
}

/// Lorentzian inner product `x^T diag(-1, 1, .., 1) y`.
pub fn lorentz_inner<T: Real>(x: &DVector<T>, y: &DVector<T>) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("ambient dimension must be at least 2".into()));
    }
    Ok(raw::minkowski(x, y))
}

/// A point on the hyperboloid, stored in ambient coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LorentzPoint<T: Real> {
    coords: DVector<T>,
}

impl<T: Real> LorentzPoint<T> {
    /// Validates `<x, x>_L = -1` (relative to the point's scale) and `x_0 > 0`.
    pub fn new(coords: DVector<T>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidArgument("ambient dimension must be at least 2".into()));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        let residual = raw::minkowski(&coords, &coords) + T::one();
        let scale = T::one().max(coords[0] * coords[0]);
        if coords[0] <= T::zero() || residual.abs() > T::manifold_tol() * scale {
            return Err(Error::OffManifold { residual: residual.to_f64().unwrap_or(f64::NAN) });
        }
        Ok(Self { coords })
    }

    /// Builds the point with the given spatial coordinates, solving for `x_0`.
    pub fn from_spatial(spatial: &[T]) -> Self {
        let mut coords = DVector::zeros(spatial.len() + 1);
        for (i, s) in spatial.iter().enumerate() {
            coords[i + 1] = *s;
        }
        raw::renormalize(&mut coords);
        Self { coords }
    }

    /// Wraps coordinates that are known to be on the manifold.
    pub(crate) fn from_coords_unchecked(coords: DVector<T>) -> Self {
        Self { coords }
    }

    /// The origin `mu_0 = (1, 0, .., 0)` of `H^d`.
    pub fn origin(d: usize) -> Self {
        Self { coords: raw::origin(d) }
    }

    /// Intrinsic dimension `D`.
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn coords(&self) -> &DVector<T> {
        &self.coords
    }

    pub fn into_coords(self) -> DVector<T> {
        self.coords
    }

    pub fn distance(&self, other: &Self) -> T {
        raw::distance(&self.coords, &other.coords)
    }

    pub fn poincare(&self) -> DVector<T> {
        raw::poincare(&self.coords)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Repr<T: Real> {
    Ambient(DVector<T>),
    Local(DVector<T>),
}

/// Tangent vector at a base point, in ambient or local coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector<T: Real> {
    base: LorentzPoint<T>,
    repr: Repr<T>,
}

impl<T: Real> TangentVector<T> {
    /// Ambient representation; must be Lorentz-orthogonal to `base`.
    pub fn from_ambient(base: &LorentzPoint<T>, v: DVector<T>) -> Result<Self> {
        if v.len() != base.coords.len() {
            return Err(Error::DimensionMismatch { expected: base.coords.len(), got: v.len() });
        }
        let along = raw::minkowski(&base.coords, &v);
        let scale = T::one().max(v.norm() * base.coords[0]);
        if along.abs() > T::manifold_tol() * scale {
            return Err(Error::InvalidArgument(format!(
                "vector is not tangent (residual {:e})",
                along.to_f64().unwrap_or(f64::NAN)
            )));
        }
        Ok(Self { base: base.clone(), repr: Repr::Ambient(v) })
    }

    /// Local-coordinate representation (length `D`).
    pub fn from_local(base: &LorentzPoint<T>, v: DVector<T>) -> Result<Self> {
        if v.len() != base.dim() {
            return Err(Error::DimensionMismatch { expected: base.dim(), got: v.len() });
        }
        Ok(Self { base: base.clone(), repr: Repr::Local(v) })
    }

    pub fn zero(base: &LorentzPoint<T>) -> Self {
        Self { base: base.clone(), repr: Repr::Local(DVector::zeros(base.dim())) }
    }

    pub fn base(&self) -> &LorentzPoint<T> {
        &self.base
    }

    pub fn ambient(&self) -> DVector<T> {
        match &self.repr {
            Repr::Ambient(v) => v.clone(),
            Repr::Local(l) => raw::to_ambient(&self.base.coords, l),
        }
    }

    pub fn local(&self) -> DVector<T> {
        match &self.repr {
            Repr::Ambient(v) => raw::to_local(&self.base.coords, v),
            Repr::Local(l) => l.clone(),
        }
    }

    /// Riemannian norm `||u||_x`.
    pub fn norm(&self) -> T {
        match &self.repr {
            Repr::Ambient(v) => raw::tangent_norm(v),
            Repr::Local(l) => l.norm(),
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        let repr = match &self.repr {
            Repr::Ambient(v) => Repr::Ambient(v * s),
            Repr::Local(l) => Repr::Local(l * s),
        };
        Self { base: self.base.clone(), repr }
    }
}

/// Orthonormal tangent basis `V_x` obtained by transporting `e_1..e_D` from the origin.
#[derive(Clone, Debug)]
pub struct TangentBasis<T: Real> {
    base: LorentzPoint<T>,
    columns: DMatrix<T>,
}

impl<T: Real> TangentBasis<T> {
    pub fn at(x: &LorentzPoint<T>) -> Self {
        Self { base: x.clone(), columns: raw::basis(&x.coords) }
    }

    pub fn base(&self) -> &LorentzPoint<T> {
        &self.base
    }

    /// The `(D+1) x D` matrix `V_x`.
    pub fn columns(&self) -> &DMatrix<T> {
        &self.columns
    }

    /// `V_x V_x^T = G + x x^T`; maps Euclidean partial derivatives to Riemannian gradients.
    pub fn gradient_projector(&self) -> DMatrix<T> {
        &self.columns * self.columns.transpose()
    }

    /// Ambient covariance `V_x S V_x^T` from a local `D x D` covariance.
    pub fn ambient_covariance(&self, local: &DMatrix<T>) -> DMatrix<T> {
        &self.columns * local * self.columns.transpose()
    }
}

fn check_same_dim<T: Real>(a: &LorentzPoint<T>, b: &LorentzPoint<T>) -> Result<()> {
    if a.coords.len() != b.coords.len() {
        return Err(Error::DimensionMismatch { expected: a.coords.len(), got: b.coords.len() });
    }
    Ok(())
}

/// Geodesic distance `arccosh(-<x, z>_L)`.
pub fn distance<T: Real>(x: &LorentzPoint<T>, z: &LorentzPoint<T>) -> Result<T> {
    check_same_dim(x, z)?;
    Ok(raw::distance(&x.coords, &z.coords))
}

/// Exponential map; `u` must be based at `x`.
pub fn expmap<T: Real>(x: &LorentzPoint<T>, u: &TangentVector<T>) -> Result<LorentzPoint<T>> {
    check_same_dim(x, &u.base)?;
    Ok(LorentzPoint { coords: raw::exp(&x.coords, &u.ambient()) })
}

pub fn logmap<T: Real>(x: &LorentzPoint<T>, z: &LorentzPoint<T>) -> Result<TangentVector<T>> {
    check_same_dim(x, z)?;
    Ok(TangentVector { base: x.clone(), repr: Repr::Ambient(raw::log(&x.coords, &z.coords)) })
}

pub fn parallel_transport<T: Real>(
    x: &LorentzPoint<T>,
    z: &LorentzPoint<T>,
    u: &TangentVector<T>,
) -> Result<TangentVector<T>> {
    check_same_dim(x, z)?;
    check_same_dim(x, &u.base)?;
    let v = raw::transport(&x.coords, &z.coords, &u.ambient());
    Ok(TangentVector { base: z.clone(), repr: Repr::Ambient(v) })
}

/// Orthogonal projection of an ambient vector onto `T_x H^D`.
pub fn project_to_tangent<T: Real>(x: &LorentzPoint<T>, w: &DVector<T>) -> Result<TangentVector<T>> {
    if w.len() != x.coords.len() {
        return Err(Error::DimensionMismatch { expected: x.coords.len(), got: w.len() });
    }
    Ok(TangentVector { base: x.clone(), repr: Repr::Ambient(raw::tangent_proj(&x.coords, w)) })
}

/// Local coordinates of an ambient tangent vector at `x`.
pub fn to_local<T: Real>(x: &LorentzPoint<T>, u_ambient: &DVector<T>) -> Result<DVector<T>> {
    Ok(TangentVector::from_ambient(x, u_ambient.clone())?.local())
}

/// Ambient tangent vector from local coordinates at `x`.
pub fn to_ambient<T: Real>(x: &LorentzPoint<T>, u_local: &DVector<T>) -> Result<TangentVector<T>> {
    let l = TangentVector::from_local(x, u_local.clone())?;
    let v = l.ambient();
    Ok(TangentVector { base: x.clone(), repr: Repr::Ambient(v) })
}

/// Stereographic projection to the Poincaré ball, `x_i / (1 + x_0)`.
pub fn poincare_from_lorentz<T: Real>(x: &LorentzPoint<T>) -> DVector<T> {
    x.poincare()
}
