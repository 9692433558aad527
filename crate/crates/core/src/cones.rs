//! Entailment cones on the hyperboloid.
//!
//! A general concept `q` owns a cone whose half-aperture shrinks as `q` moves
//! away from the origin. A specific concept `p` is penalised by how far its
//! exterior angle at `q` exceeds the (thresholded) half-aperture. Argument
//! order is always `(specific, general)`.

use crate::error::{Error, Result};
use crate::manifold::{inner_excess, time_coord, HyperPoint, PairGrad, COINCIDENT_FLOOR};
use crate::scalar::{dot, norm, Real};

/// Default boundary constant limiting apertures near the origin.
pub const DEFAULT_K: f64 = 0.1;
/// Floor applied to `‖q̃‖` in the aperture and exterior angle.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApertureParams<T> {
    pub k: T,
    pub eta: T,
}

impl<T: Real> ApertureParams<T> {
    pub fn new(k: T, eta: T) -> Result<Self> {
        if !(k > T::zero()) || !k.is_finite() {
            return Err(Error::Config(format!("aperture constant K must be > 0, got {k}")));
        }
        if !(eta >= T::zero()) || !eta.is_finite() {
            return Err(Error::Config(format!("aperture threshold eta must be >= 0, got {eta}")));
        }
        Ok(Self { k, eta })
    }
}

impl<T: Real> Default for ApertureParams<T> {
    fn default() -> Self {
        Self {
            k: T::lit(DEFAULT_K),
            eta: T::one(),
        }
    }
}

/// `ω(q) = asin(2K / (√κ ‖q̃‖))`, clamped into `[0, π/2]`. The gradient is
/// `None` when the clamp binds.
pub(crate) fn half_aperture_kernel<T: Real>(q: &[T], kappa: T, k: T) -> (T, Option<(Vec<T>, T)>) {
    let raw_norm = norm(q);
    let m = raw_norm.max(T::lit(NORM_FLOOR));
    let w = T::lit(2.0) * k / (kappa.sqrt() * m);
    if w >= T::one() {
        return (T::FRAC_PI_2(), None);
    }
    let omega = w.asin();
    let dw = (T::one() - w * w).sqrt().recip();
    let dq = if raw_norm > T::lit(NORM_FLOOR) {
        let c = -dw * w / (m * m);
        q.iter().map(|&x| c * x).collect()
    } else {
        vec![T::zero(); q.len()]
    };
    let dkappa = -dw * w / (T::lit(2.0) * kappa);
    (omega, Some((dq, dkappa)))
}

/// Exterior angle `φ(p, q)` at `q` between the ray from the origin through
/// `q` and the geodesic from `q` to `p`, with
/// `cos φ = (p₀ + q₀κ⟨p,q⟩) / (‖q̃‖ sqrt((κ⟨p,q⟩)² − 1))` and
/// `sin φ = √κ ‖p̃ ∧ q̃‖ / (‖q̃‖ sqrt((κ⟨p,q⟩)² − 1))`, combined through `atan2`
/// so that collinear points give exactly 0.
/// Coincident and collinear points give no gradient.
pub(crate) fn exterior_angle_kernel<T: Real>(p: &[T], q: &[T], kappa: T) -> (T, Option<PairGrad<T>>) {
    let p0 = time_coord(p, kappa);
    let q0 = time_coord(q, kappa);
    let x = inner_excess(p, q, kappa);
    let a = T::one() + x;
    let s_sq = x * (x + T::lit(2.0));
    if s_sq < T::lit(COINCIDENT_FLOOR) {
        return (T::zero(), None);
    }
    let s = s_sq.sqrt();
    let raw_norm = norm(q);
    let m = raw_norm.max(T::lit(NORM_FLOOR));
    let cross: T = p.iter().zip(q).map(|(&u, &v)| (u - v) * (u + v)).sum();
    let num = cross / (p0 + q0) - q0 * x;
    let den = m * s;
    // ‖p̃ ∧ q̃‖ = ‖q̃‖ · |component of p̃ orthogonal to q̃|
    let along = if raw_norm > T::zero() {
        dot(p, q) / (raw_norm * raw_norm)
    } else {
        T::zero()
    };
    let orth = p.iter().zip(q).map(|(&u, &v)| (u - along * v) * (u - along * v)).sum::<T>().sqrt();
    let y = kappa.sqrt() * orth * m;
    let phi = y.atan2(num);
    if !(y > T::zero()) {
        return (phi, None);
    }
    let sin_phi = y / y.hypot(num);

    let dphi = -sin_phi.recip();
    let g_p0 = dphi / den;
    let g_q0 = dphi * (-a) / den;
    let g_a = dphi * (-q0 / den - num / (den * den) * m * a / s);
    let g_m = dphi * (-num / (den * den) * s);

    let g_m_over = if raw_norm > T::lit(NORM_FLOOR) { g_m / m } else { T::zero() };
    let dp = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| g_p0 * pi / p0 + g_a * kappa * (q0 * pi / p0 - qi))
        .collect();
    let dq = q
        .iter()
        .zip(p)
        .map(|(&qi, &pi)| g_q0 * qi / q0 + g_a * kappa * (p0 * qi / q0 - pi) + g_m_over * qi)
        .collect();
    let two = T::lit(2.0);
    let dp0_dk = -(two * kappa * kappa * p0).recip();
    let dq0_dk = -(two * kappa * kappa * q0).recip();
    let da_dk = a / kappa + kappa * (q0 * dp0_dk + p0 * dq0_dk);
    let dkappa = g_p0 * dp0_dk + g_q0 * dq0_dk + g_a * da_dk;
    (phi, Some(PairGrad { dp, dq, dkappa }))
}

/// Half-aperture of the entailment cone at `q`.
pub fn half_aperture<T: Real>(q: &HyperPoint<T>, k: T) -> T {
    half_aperture_kernel(q.spatial(), q.curvature().kappa(), k).0
}

/// Exterior angle of `p` with respect to the cone at `q`.
pub fn exterior_angle<T: Real>(p: &HyperPoint<T>, q: &HyperPoint<T>) -> Result<T> {
    check_pair(p, q)?;
    Ok(exterior_angle_kernel(p.spatial(), q.spatial(), p.curvature().kappa()).0)
}

/// `max(0, φ(p,q) − η·ω(q))` for a specific concept `p` and general concept `q`.
pub fn entailment_penalty<T: Real>(p: &HyperPoint<T>, q: &HyperPoint<T>, params: ApertureParams<T>) -> Result<T> {
    let phi = exterior_angle(p, q)?;
    let omega = half_aperture(q, params.k);
    Ok((phi - params.eta * omega).max(T::zero()))
}

fn check_pair<T: Real>(p: &HyperPoint<T>, q: &HyperPoint<T>) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            got: p.dim(),
        });
    }
    if p.curvature() != q.curvature() {
        return Err(Error::CurvatureMismatch(
            p.curvature().kappa().as_f64(),
            q.curvature().kappa().as_f64(),
        ));
    }
    Ok(())
}
