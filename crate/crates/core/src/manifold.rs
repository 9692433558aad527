//! Lorentz (hyperboloid) model of hyperbolic space with curvature `-κ`.
//!
//! Points live on the upper sheet `{p : ⟨p,p⟩_L = -1/κ, p₀ > 0}` of a
//! two-sheeted hyperboloid in Minkowski space. Only the spatial coordinates
//! are stored; the time coordinate `p₀ = sqrt(1/κ + ‖p̃‖²)` is recomputed on
//! demand, so a stored point cannot drift off the manifold.
//!
//! Tangent norms are `sqrt(⟨v,v⟩_L)`. At the origin a tangent vector has a
//! zero time component, so `⟨v,v⟩_L = ‖ṽ‖² ≥ 0`.

use crate::error::{Error, Result};
use crate::scalar::{dot, norm, norm_sq, Real};

/// Below this value of `√κ‖v‖_L` the exponential map uses `sinh(x)/x ≈ 1 + x²/6`.
pub const SINHC_SERIES_BELOW: f64 = 1e-4;
/// Floor on `(κ⟨p,q⟩_L)² − 1` below which two points are treated as coincident.
pub const COINCIDENT_FLOOR: f64 = 1e-14;
/// Learnable curvature is clamped into this interval.
pub const KAPPA_MIN: f64 = 0.1;
pub const KAPPA_MAX: f64 = 10.0;

/// Curvature magnitude `κ > 0`; the space has sectional curvature `-κ`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Curvature<T>(T);

impl<T: Real> Curvature<T> {
    pub fn new(kappa: T) -> Result<Self> {
        if kappa.is_finite() && kappa > T::zero() {
            Ok(Self(kappa))
        } else {
            Err(Error::InvalidCurvature(kappa.as_f64()))
        }
    }

    /// Unit curvature, `κ = 1`.
    pub fn unit() -> Self {
        Self(T::one())
    }

    /// Curvature for a learnable value, clamped into `[KAPPA_MIN, KAPPA_MAX]`.
    pub fn clamped(kappa: T) -> Self {
        let lo = T::lit(KAPPA_MIN);
        let hi = T::lit(KAPPA_MAX);
        Self(if kappa.is_nan() { T::one() } else { kappa.max(lo).min(hi) })
    }

    #[inline]
    pub fn kappa(self) -> T {
        self.0
    }

    #[inline]
    pub fn sqrt_kappa(self) -> T {
        self.0.sqrt()
    }
}

/// A point on the hyperboloid, stored by its spatial coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperPoint<T> {
    spatial: Vec<T>,
    curvature: Curvature<T>,
}

impl<T: Real> HyperPoint<T> {
    pub fn new(spatial: Vec<T>, curvature: Curvature<T>) -> Self {
        Self { spatial, curvature }
    }

    /// The origin `(1/√κ, 0, …, 0)`.
    pub fn origin(dim: usize, curvature: Curvature<T>) -> Self {
        Self::new(vec![T::zero(); dim], curvature)
    }

    /// Builds a point from a full `(n+1)`-vector, keeping its spatial part.
    pub fn from_ambient(ambient: &[T], curvature: Curvature<T>) -> Result<Self> {
        if ambient.len() < 2 {
            return Err(Error::contract("ambient vector needs a time and at least one spatial coordinate"));
        }
        Ok(Self::new(ambient[1..].to_vec(), curvature))
    }

    pub fn dim(&self) -> usize {
        self.spatial.len()
    }

    pub fn spatial(&self) -> &[T] {
        &self.spatial
    }

    pub fn into_spatial(self) -> Vec<T> {
        self.spatial
    }

    pub fn curvature(&self) -> Curvature<T> {
        self.curvature
    }

    pub fn time(&self) -> T {
        time_coord(&self.spatial, self.curvature.kappa())
    }

    /// Euclidean norm of the spatial part, the "radius" of the point.
    pub fn spatial_norm(&self) -> T {
        norm(&self.spatial)
    }

    /// The full `(n+1)`-vector `(p₀, p̃)`.
    pub fn ambient(&self) -> Vec<T> {
        time_lift(&self.spatial, self.curvature)
    }

    pub fn is_origin(&self) -> bool {
        self.spatial.iter().all(|x| *x == T::zero())
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        if self.curvature != other.curvature {
            return Err(Error::CurvatureMismatch(
                self.curvature.kappa().as_f64(),
                other.curvature.kappa().as_f64(),
            ));
        }
        Ok(())
    }
}

/// A tangent vector, stored as its full `(n+1)` ambient components together
/// with its base point.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector<T> {
    components: Vec<T>,
    base: HyperPoint<T>,
}

impl<T: Real> TangentVector<T> {
    /// Tangent vector at the origin with the given spatial part and zero time component.
    pub fn at_origin(spatial: Vec<T>, curvature: Curvature<T>) -> Self {
        let dim = spatial.len();
        let mut components = Vec::with_capacity(dim + 1);
        components.push(T::zero());
        components.extend(spatial);
        Self {
            components,
            base: HyperPoint::origin(dim, curvature),
        }
    }

    /// Tangent vector at `base` from its full ambient components.
    pub fn at(base: HyperPoint<T>, components: Vec<T>) -> Result<Self> {
        if components.len() != base.dim() + 1 {
            return Err(Error::DimensionMismatch {
                expected: base.dim() + 1,
                got: components.len(),
            });
        }
        Ok(Self { components, base })
    }

    pub fn zero(base: HyperPoint<T>) -> Self {
        let components = vec![T::zero(); base.dim() + 1];
        Self { components, base }
    }

    pub fn base(&self) -> &HyperPoint<T> {
        &self.base
    }

    pub fn components(&self) -> &[T] {
        &self.components
    }

    pub fn spatial(&self) -> &[T] {
        &self.components[1..]
    }

    pub fn into_spatial(mut self) -> Vec<T> {
        self.components.remove(0);
        self.components
    }

    /// `sqrt(⟨v,v⟩_L)`, with the inner product floored at zero against rounding.
    pub fn lorentz_norm(&self) -> T {
        minkowski(&self.components, &self.components).max(T::zero()).sqrt()
    }
}

#[inline]
fn minkowski<T: Real>(p: &[T], q: &[T]) -> T {
    -p[0] * q[0] + dot(&p[1..], &q[1..])
}

/// Lorentzian inner product `−p₀q₀ + ⟨p̃, q̃⟩` of two full `(n+1)`-vectors.
pub fn lorentz_inner<T: Real>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::contract("empty vector has no time coordinate"));
    }
    Ok(minkowski(p, q))
}

/// Lorentzian inner product of two on-manifold points.
pub fn point_inner<T: Real>(p: &HyperPoint<T>, q: &HyperPoint<T>) -> Result<T> {
    p.check_compatible(q)?;
    Ok(-p.time() * q.time() + dot(p.spatial(), q.spatial()))
}

/// `p₀ = sqrt(1/κ + ‖p̃‖²)`.
#[inline]
pub fn time_coord<T: Real>(spatial: &[T], kappa: T) -> T {
    (kappa.recip() + norm_sq(spatial)).sqrt()
}

/// Lifts spatial coordinates onto the upper sheet, returning `(p₀, p̃)`.
pub fn time_lift<T: Real>(spatial: &[T], curvature: Curvature<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(spatial.len() + 1);
    out.push(time_coord(spatial, curvature.kappa()));
    out.extend_from_slice(spatial);
    out
}

/// `−κ⟨p,q⟩_L − 1` for two points given by spatial coordinates, evaluated as
/// `κ/2·(‖p̃−q̃‖² − (p₀−q₀)²)` so that nearby points keep full relative precision.
#[inline]
pub(crate) fn inner_excess<T: Real>(p: &[T], q: &[T], kappa: T) -> T {
    let p0 = time_coord(p, kappa);
    let q0 = time_coord(q, kappa);
    let mut diff_sq = T::zero();
    let mut cross = T::zero();
    for (&a, &b) in p.iter().zip(q) {
        diff_sq += (a - b) * (a - b);
        cross += (a - b) * (a + b);
    }
    let dt = cross / (p0 + q0);
    (kappa / T::lit(2.0) * (diff_sq - dt * dt)).max(T::zero())
}

/// `acosh(1 + x)` for `x ≥ 0` without cancellation near 0.
#[inline]
pub(crate) fn acosh1p<T: Real>(x: T) -> T {
    let x = x.max(T::zero());
    (x + (x * (x + T::lit(2.0))).sqrt()).ln_1p()
}

/// Geodesic distance between two spatial coordinate vectors.
#[inline]
pub(crate) fn distance_spatial<T: Real>(p: &[T], q: &[T], kappa: T) -> T {
    acosh1p(inner_excess(p, q, kappa)) / kappa.sqrt()
}

/// `d(p,q) = acosh(−κ⟨p,q⟩_L)/√κ`, argument clamped to `≥ 1`.
pub fn geodesic_distance<T: Real>(p: &HyperPoint<T>, q: &HyperPoint<T>) -> Result<T> {
    p.check_compatible(q)?;
    Ok(distance_spatial(p.spatial(), q.spatial(), p.curvature.kappa()))
}

/// `sinh(x)/x`, with its Taylor series near zero.
#[inline]
pub(crate) fn sinhc<T: Real>(x: T) -> T {
    if x.abs() < T::lit(SINHC_SERIES_BELOW) {
        T::one() + x * x / T::lit(6.0)
    } else {
        x.sinh() / x
    }
}

/// Spatial part of `exp_0(u)` for a tangent vector `u` at the origin.
#[inline]
pub(crate) fn expmap0_spatial<T: Real>(u: &[T], kappa: T) -> Vec<T> {
    let z = kappa.sqrt() * norm(u);
    let f = sinhc(z);
    u.iter().map(|&x| f * x).collect()
}

/// Partial derivatives of a two-point quantity with respect to the spatial
/// coordinates of both points and the curvature.
#[derive(Clone, Debug)]
pub(crate) struct PairGrad<T> {
    pub dp: Vec<T>,
    pub dq: Vec<T>,
    pub dkappa: T,
}

/// Geodesic distance with its gradient. Coincident points (where `acosh` is
/// not differentiable) yield no gradient.
pub(crate) fn distance_kernel<T: Real>(p: &[T], q: &[T], kappa: T) -> (T, Option<PairGrad<T>>) {
    let p0 = time_coord(p, kappa);
    let q0 = time_coord(q, kappa);
    let x = inner_excess(p, q, kappa);
    let sk = kappa.sqrt();
    let d = acosh1p(x) / sk;
    let s_sq = x * (x + T::lit(2.0));
    if s_sq < T::lit(COINCIDENT_FLOOR) {
        return (d, None);
    }
    let g_a = (sk * s_sq.sqrt()).recip();
    let dp = p.iter().zip(q).map(|(&pi, &qi)| g_a * kappa * (q0 * pi / p0 - qi)).collect();
    let dq = q.iter().zip(p).map(|(&qi, &pi)| g_a * kappa * (p0 * qi / q0 - pi)).collect();
    let two = T::lit(2.0);
    let dp0_dk = -(two * kappa * kappa * p0).recip();
    let dq0_dk = -(two * kappa * kappa * q0).recip();
    let da_dk = (T::one() + x) / kappa + kappa * (q0 * dp0_dk + p0 * dq0_dk);
    let dkappa = -d / (two * kappa) + g_a * da_dk;
    (d, Some(PairGrad { dp, dq, dkappa }))
}

/// Vector-Jacobian product of [`expmap0_spatial`]: given the upstream
/// gradient on the output, returns the gradients on `u` and on `κ`.
pub(crate) fn expmap0_vjp<T: Real>(u: &[T], kappa: T, upstream: &[T]) -> (Vec<T>, T) {
    let sk = kappa.sqrt();
    let r = norm(u);
    let z = sk * r;
    let f = sinhc(z);
    let gu = dot(upstream, u);
    // f'(z)/z, series below 1e-2 where the direct form cancels
    let fprime_over_z = if z < T::lit(1e-2) {
        let z2 = z * z;
        T::one() / T::lit(3.0) + z2 / T::lit(30.0) + z2 * z2 / T::lit(840.0)
    } else {
        (z * z.cosh() - z.sinh()) / (z * z * z)
    };
    // ∂out/∂u = f·I + f'(z)·√κ/r · u uᵀ = f·I + κ·(f'(z)/z) · u uᵀ
    let c = kappa * fprime_over_z * gu;
    let du = upstream.iter().zip(u).map(|(&g, &x)| f * g + c * x).collect();
    // ∂out/∂κ = f'(z) · r/(2√κ) · u = (f'(z)/z) · r²/2 · u
    let dkappa = fprime_over_z * r * r / T::lit(2.0) * gu;
    (du, dkappa)
}

/// Exponential map `cosh(√κ‖v‖)·p + sinh(√κ‖v‖)/(√κ‖v‖)·v`.
pub fn exp_map<T: Real>(base: &HyperPoint<T>, v: &TangentVector<T>) -> Result<HyperPoint<T>> {
    base.check_compatible(v.base())?;
    let kappa = base.curvature.kappa();
    if base.is_origin() {
        let spatial = expmap0_spatial(v.spatial(), kappa);
        return Ok(HyperPoint::new(spatial, base.curvature));
    }
    let x = kappa.sqrt() * v.lorentz_norm();
    let (c, s) = (x.cosh(), sinhc(x));
    let spatial = base.spatial().iter().zip(v.spatial()).map(|(&p, &t)| c * p + s * t).collect();
    Ok(HyperPoint::new(spatial, base.curvature))
}

/// Logarithmic map, the inverse of [`exp_map`]:
/// `acosh(−κ⟨p,q⟩)/sqrt((κ⟨p,q⟩)² − 1) · (q + κ⟨p,q⟩·p)`.
pub fn log_map<T: Real>(base: &HyperPoint<T>, q: &HyperPoint<T>) -> Result<TangentVector<T>> {
    base.check_compatible(q)?;
    let kappa = base.curvature.kappa();
    let x = inner_excess(base.spatial(), q.spatial(), kappa);
    let a = T::one() + x;
    let denom_sq = x * (x + T::lit(2.0));
    if denom_sq < T::lit(COINCIDENT_FLOOR) {
        return Ok(TangentVector::zero(base.clone()));
    }
    let factor = acosh1p(x) / denom_sq.sqrt();
    // q + κ⟨p,q⟩ p  with  κ⟨p,q⟩ = −a
    let p = base.ambient();
    let qa = q.ambient();
    let components = qa.iter().zip(&p).map(|(&qi, &pi)| factor * (qi - a * pi)).collect();
    TangentVector::at(base.clone(), components)
}

/// `exp_0(scale · raw)`: maps an encoder output onto the hyperboloid.
pub fn project_to_manifold<T: Real>(raw: &[T], scale: T, curvature: Curvature<T>) -> Result<HyperPoint<T>> {
    if !(scale > T::zero()) || !scale.is_finite() {
        return Err(Error::contract(format!("projection scale must be > 0, got {scale}")));
    }
    let scaled: Vec<T> = raw.iter().map(|&x| scale * x).collect();
    Ok(HyperPoint::new(expmap0_spatial(&scaled, curvature.kappa()), curvature))
}
