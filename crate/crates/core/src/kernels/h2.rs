//! The squared-exponential (heat) kernel on `H^2`.
//!
//! Up to normalization the kernel is
//!
//! ```text
//! F(rho) = int_rho^inf  s exp(-s^2 / (2 kappa^2)) / sqrt(cosh s - cosh rho) ds
//! ```
//!
//! and `k(rho) = sigma^2 F(rho) / F(0)`. The substitution `s = rho + t^2` removes the
//! inverse square-root singularity at the lower limit, and `cosh(rho + t^2) - cosh(rho)`
//! is evaluated as `2 sinh(rho + t^2/2) sinh(t^2/2)` in log space. The integral is
//! truncated where the Gaussian factor drops below `1e-16`.
//!
//! Two evaluation paths share the integrand:
//! * [`integral`]: adaptive Gauss–Kronrod to a relative tolerance (scalar kernel calls).
//! * [`H2Table`]: a cubic Hermite table over `rho` built with a fixed graded rule, which
//!   also carries `dF/drho` and `dF/dkappa`. The table is smooth in `kappa` and is what
//!   Gram assembly and gradients use.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use super::quadrature::{adaptive_gk15, GradedRule};
use crate::error::{Error, Result};

/// `sqrt(2 ln 1e16)`: the Gaussian factor is below 1e-16 beyond `kappa` times this.
pub const GAUSS_CUTOFF: f64 = 8.582_455_430_830_78;

const TABLE_INTERVALS: usize = 600;

pub fn truncation(kappa: f64) -> f64 {
    kappa * GAUSS_CUTOFF
}

#[inline]
fn ln_sinh(a: f64) -> f64 {
    if a > 20.0 {
        a - std::f64::consts::LN_2 + (-(-2.0 * a).exp()).ln_1p()
    } else {
        a.sinh().ln()
    }
}

#[inline]
fn base_factor(t: f64, rho: f64, kappa: f64) -> (f64, f64, f64) {
    let t2 = t * t;
    let s = rho + t2;
    let a = rho + 0.5 * t2;
    let b = 0.5 * t2;
    let ln_d = std::f64::consts::LN_2 + ln_sinh(a) + ln_sinh(b);
    let base = ((2.0 * t).ln() - 0.5 * ln_d - s * s / (2.0 * kappa * kappa)).exp();
    (base, s, a)
}

/// Integrand of `F` in the `t` variable.
#[inline]
pub fn integrand(t: f64, rho: f64, kappa: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let (base, s, _) = base_factor(t, rho, kappa);
    base * s
}

/// Integrands of `F`, `dF/drho`, `dF/dkappa`, `d2F/(drho dkappa)`.
#[inline]
fn integrand_all(t: f64, rho: f64, kappa: f64) -> [f64; 4] {
    if t <= 0.0 {
        return [0.0; 4];
    }
    let (base, s, a) = base_factor(t, rho, kappa);
    let k2 = kappa * kappa;
    let s2k = s * s / k2;
    let coth = 1.0 / a.tanh();
    [
        base * s,
        base * ((1.0 - s2k) - 0.5 * s * coth),
        base * s * s2k / kappa,
        base * (s2k / kappa * (3.0 - s2k) - 0.5 * coth * s * s2k / kappa),
    ]
}

/// `F(rho)` by adaptive quadrature.
pub fn integral(rho: f64, kappa: f64, rel_tol: f64) -> Result<f64> {
    if !(kappa > 0.0) || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!("kappa {kappa}, rho {rho}")));
    }
    let cut = truncation(kappa);
    if rho >= cut {
        return Ok(0.0);
    }
    let t_max = (cut - rho).sqrt();
    adaptive_gk15(|t| integrand(t, rho, kappa), 0.0, t_max, rel_tol, 1e-300, 4000)
}

fn normalizer_cache() -> &'static Mutex<HashMap<(u64, u64), f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(u64, u64), f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// `C_inf = F(0)`, cached per `(kappa, tolerance)`.
pub fn normalizer(kappa: f64, rel_tol: f64) -> Result<f64> {
    let key = (kappa.to_bits(), rel_tol.to_bits());
    if let Some(v) = normalizer_cache().lock().expect("cache lock").get(&key) {
        return Ok(*v);
    }
    // computed outside the lock; concurrent fills write the same value
    let v = integral(0.0, kappa, rel_tol)?;
    normalizer_cache().lock().expect("cache lock").insert(key, v);
    Ok(v)
}

/// `sigma^2 F(rho) / F(0)` by adaptive quadrature.
pub fn kernel_value(rho: f64, kappa: f64, variance: f64, rel_tol: f64) -> Result<f64> {
    let norm = normalizer(kappa, rel_tol)?;
    Ok(variance * integral(rho, kappa, rel_tol)? / norm)
}

fn graded_rule() -> &'static GradedRule {
    static RULE: OnceLock<GradedRule> = OnceLock::new();
    RULE.get_or_init(|| GradedRule::new(16, 6, 12))
}

/// Values of `[F, dF/drho, dF/dkappa, d2F/(drho dkappa)]` at `rho` with the fixed rule.
pub fn integral_with_derivatives(rho: f64, kappa: f64) -> [f64; 4] {
    let cut = truncation(kappa);
    if rho >= cut {
        return [0.0; 4];
    }
    let t_max = (cut - rho).sqrt();
    let rule = graded_rule();
    let mut acc = [0.0; 4];
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let v = integrand_all(t_max * x, rho, kappa);
        for k in 0..4 {
            acc[k] += w * v[k];
        }
    }
    for a in acc.iter_mut() {
        *a *= t_max;
    }
    if rho == 0.0 {
        // F is even in rho
        acc[1] = 0.0;
        acc[3] = 0.0;
    }
    acc
}

/// Cubic Hermite table of `F` and `dF/dkappa` over `[0, truncation(kappa)]`.
#[derive(Clone, Debug)]
pub struct H2Table {
    kappa: f64,
    step: f64,
    nodes: Vec<[f64; 4]>,
}

/// Interpolated quantities at one distance.
#[derive(Clone, Copy, Debug)]
pub struct H2Eval {
    pub f: f64,
    pub df_drho: f64,
    pub df_dkappa: f64,
}

impl H2Table {
    pub fn build(kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidArgument(format!("lengthscale must be positive, got {kappa}")));
        }
        let cut = truncation(kappa);
        let step = cut / TABLE_INTERVALS as f64;
        let nodes: Vec<[f64; 4]> = (0..=TABLE_INTERVALS)
            .map(|i| integral_with_derivatives(i as f64 * step, kappa))
            .collect();
        if nodes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Quadrature(format!("non-finite table entry for kappa {kappa}")));
        }
        Ok(Self { kappa, step, nodes })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// `F(0)` and `dF(0)/dkappa`.
    pub fn at_zero(&self) -> (f64, f64) {
        (self.nodes[0][0], self.nodes[0][2])
    }

    pub fn eval(&self, rho: f64) -> H2Eval {
        let pos = rho / self.step;
        if pos >= TABLE_INTERVALS as f64 {
            return H2Eval { f: 0.0, df_drho: 0.0, df_dkappa: 0.0 };
        }
        let i = pos.floor() as usize;
        let tau = pos - i as f64;
        let (a, b) = (&self.nodes[i], &self.nodes[i + 1]);
        let h = self.step;
        let (t2, t3) = (tau * tau, tau * tau * tau);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + tau;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let f = h00 * a[0] + h10 * h * a[1] + h01 * b[0] + h11 * h * b[1];
        let df = ((6.0 * t2 - 6.0 * tau) * a[0]
            + (3.0 * t2 - 4.0 * tau + 1.0) * h * a[1]
            + (-6.0 * t2 + 6.0 * tau) * b[0]
            + (3.0 * t2 - 2.0 * tau) * h * b[1])
            / h;
        let fk = h00 * a[2] + h10 * h * a[3] + h01 * b[2] + h11 * h * b[3];
        H2Eval { f, df_drho: df, df_dkappa: fk }
    }

    /// Second derivative of the interpolant at `rho = 0`.
    pub fn second_derivative_at_zero(&self) -> f64 {
        let (a, b) = (&self.nodes[0], &self.nodes[1]);
        let h = self.step;
        (-6.0 * a[0] - 4.0 * h * a[1] + 6.0 * b[0] - 2.0 * h * b[1]) / (h * h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_rule_matches_adaptive() {
        for kappa in [0.3, 1.0, 3.0] {
            for rho in [0.0, 0.001, 0.02, 0.5, 2.0, 5.0] {
                let a = integral(rho, kappa, 1e-12).unwrap();
                let f = integral_with_derivatives(rho, kappa)[0];
                assert!((a - f).abs() < 1e-9 * a.abs().max(1e-3), "{kappa} {rho}: {a} {f}");
            }
        }
    }

    #[test]
    fn derivative_integrands_match_finite_differences() {
        for kappa in [0.5, 1.0, 2.5] {
            for rho in [0.05, 0.4, 1.5, 3.0] {
                let v = integral_with_derivatives(rho, kappa);
                let h = 1e-5;
                let dr = (integral_with_derivatives(rho + h, kappa)[0]
                    - integral_with_derivatives(rho - h, kappa)[0])
                    / (2.0 * h);
                let dk = (integral_with_derivatives(rho, kappa + h)[0]
                    - integral_with_derivatives(rho, kappa - h)[0])
                    / (2.0 * h);
                let drk = (integral_with_derivatives(rho, kappa + h)[1]
                    - integral_with_derivatives(rho, kappa - h)[1])
                    / (2.0 * h);
                let scale = v[0].abs().max(1e-3);
                assert!((v[1] - dr).abs() < 1e-6 * scale, "drho {kappa} {rho}: {} {dr}", v[1]);
                assert!((v[2] - dk).abs() < 1e-6 * scale, "dkappa {kappa} {rho}: {} {dk}", v[2]);
                assert!((v[3] - drk).abs() < 1e-5 * scale, "drk {kappa} {rho}: {} {drk}", v[3]);
            }
        }
    }

    #[test]
    fn slope_vanishes_at_origin() {
        let kappa = 1.0;
        let small = integral_with_derivatives(1e-4, kappa)[1];
        let f0 = integral_with_derivatives(0.0, kappa)[0];
        assert!(small.abs() < 1e-3 * f0, "{small}");
    }

    #[test]
    fn table_interpolates_accurately() {
        for kappa in [0.2, 1.0, 4.0] {
            let table = H2Table::build(kappa).unwrap();
            for k in 0..57 {
                let rho = k as f64 * 0.137 * kappa;
                let direct = integral(rho, kappa, 1e-12).unwrap();
                let e = table.eval(rho);
                assert!((e.f - direct).abs() < 1e-8 * table.at_zero().0, "{kappa} {rho}");
            }
        }
    }
}
