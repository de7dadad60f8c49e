//! Lorentz (hyperboloid) model of hyperbolic space.
//!
//! Points live on the upper sheet
//! `{x in R^(n+1) : <x, x>_L = -1/kappa, x_0 > 0}` where
//! `<x, y>_L = -x_0 y_0 + sum_i x_i y_i`. The space has constant curvature
//! `-kappa` with `kappa > 0`. Index 0 is the time component, indices `1..=n`
//! the spatial part.
//!
//! All arithmetic is float64.

use log::warn;

use crate::error::{check_dim, Error, Result};

/// Relative tolerance used by the membership invariant of [`CurvedPoint`].
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Below this norm (or distance) exp/log switch to their series limits.
pub const SERIES_THRESHOLD: f64 = 1e-8;

/// Clamp corrections larger than this are reported through `log`.
const CLAMP_WARN: f64 = 1e-6;

/// Minkowski inner product of two `(n+1)`-vectors.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::domain(format!(
            "Lorentz vectors need a time and at least one spatial coordinate, got length {}",
            x.len()
        )));
    }
    Ok(minkowski(x, y))
}

#[inline]
fn minkowski(x: &[f64], y: &[f64]) -> f64 {
    let spatial: f64 = x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum();
    spatial - x[0] * y[0]
}

/// `true` iff `x_0 > 0` and `|<x, x>_L + 1/kappa| <= tol`.
pub fn is_on_hyperboloid(x: &[f64], kappa: f64, tol: f64) -> bool {
    if x.len() < 2 || !(kappa > 0.0) || !(x[0] > 0.0) {
        return false;
    }
    (minkowski(x, x) + 1.0 / kappa).abs() <= tol
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa.is_finite() && kappa > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("curvature parameter must be positive and finite, got {kappa}")))
    }
}

fn same_kappa(a: f64, b: f64) -> Result<()> {
    if (a - b).abs() <= 1e-12 * a.abs().max(b.abs()) {
        Ok(())
    } else {
        Err(Error::domain(format!("curvature mismatch: {a} vs {b}")))
    }
}

/// A point on the hyperboloid of curvature `-kappa`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvedPoint {
    time: f64,
    spatial: Vec<f64>,
    kappa: f64,
}

impl CurvedPoint {
    /// Lifts a spatial vector onto the hyperboloid by solving for the time
    /// component: `x_0 = sqrt(|z|^2 + 1/kappa)`.
    pub fn lift(z: &[f64], kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        if z.is_empty() {
            return Err(Error::domain("cannot lift an empty spatial vector"));
        }
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite spatial coordinate {bad}")));
        }
        Ok(Self::lift_unchecked(z.to_vec(), kappa))
    }

    pub(crate) fn lift_unchecked(spatial: Vec<f64>, kappa: f64) -> Self {
        let sq: f64 = spatial.iter().map(|v| v * v).sum();
        Self {
            time: (sq + 1.0 / kappa).sqrt(),
            spatial,
            kappa,
        }
    }

    /// The point with zero spatial part, `(1/sqrt(kappa), 0, ..., 0)`.
    pub fn apex(dim: usize, kappa: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("apex needs spatial dimension >= 1"));
        }
        Self::lift(&vec![0.0; dim], kappa)
    }

    /// Builds a point from full `(n+1)` coordinates, validating membership.
    pub fn from_coords(coords: &[f64], kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        if coords.len() < 2 {
            return Err(Error::domain("a curved point needs at least 2 coordinates"));
        }
        let spatial_sq: f64 = coords[1..].iter().map(|v| v * v).sum();
        let tol = MEMBERSHIP_TOL * spatial_sq.max(1.0);
        if !is_on_hyperboloid(coords, kappa, tol) {
            return Err(Error::domain("coordinates are not on the upper hyperboloid sheet"));
        }
        Ok(Self {
            time: coords[0],
            spatial: coords[1..].to_vec(),
            kappa,
        })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn spatial(&self) -> &[f64] {
        &self.spatial
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.spatial.len()
    }

    /// Euclidean norm of the spatial part; zero exactly at the apex.
    pub fn spatial_norm(&self) -> f64 {
        self.spatial.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn coords(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.spatial.len() + 1);
        out.push(self.time);
        out.extend_from_slice(&self.spatial);
        out
    }

    /// Lorentzian inner product with another point of the same dimension.
    pub fn inner(&self, other: &CurvedPoint) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.inner_unchecked(other))
    }

    pub(crate) fn inner_unchecked(&self, other: &CurvedPoint) -> f64 {
        let spatial: f64 = self
            .spatial
            .iter()
            .zip(&other.spatial)
            .map(|(a, b)| a * b)
            .sum();
        spatial - self.time * other.time
    }
}

/// A vector in the tangent space at `base`, stored with full `(n+1)`
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
    base: CurvedPoint,
}

impl TangentVector {
    pub fn zero(base: &CurvedPoint) -> Self {
        Self {
            coords: vec![0.0; base.dim() + 1],
            base: base.clone(),
        }
    }

    pub fn time(&self) -> f64 {
        self.coords[0]
    }

    pub fn spatial(&self) -> &[f64] {
        &self.coords[1..]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn base(&self) -> &CurvedPoint {
        &self.base
    }

    /// Same base, coordinates multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            coords: self.coords.iter().map(|c| c * factor).collect(),
            base: self.base.clone(),
        }
    }

    /// `sqrt(<v, v>_L)`, with tiny negative roundoff treated as zero.
    pub fn lorentz_norm(&self) -> f64 {
        minkowski(&self.coords, &self.coords).max(0.0).sqrt()
    }

    fn euclidean_norm(&self) -> f64 {
        self.coords.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Geodesic distance `(1/sqrt(kappa)) * arccosh(-kappa <x, y>_L)`.
///
/// The arccosh argument is clamped to `>= 1`.
pub fn geodesic_distance(x: &CurvedPoint, y: &CurvedPoint) -> Result<f64> {
    same_kappa(x.kappa, y.kappa)?;
    check_dim(x.dim(), y.dim())?;
    Ok(distance_unchecked(x, y))
}

pub(crate) fn distance_unchecked(x: &CurvedPoint, y: &CurvedPoint) -> f64 {
    if x.time == y.time && x.spatial == y.spatial {
        // roundoff in <x, x>_L would otherwise leave ~1e-8 here
        return 0.0;
    }
    let kappa = x.kappa;
    let arg = -kappa * x.inner_unchecked(y);
    arccosh_clamped(arg) / kappa.sqrt()
}

fn arccosh_clamped(arg: f64) -> f64 {
    if arg < 1.0 {
        if 1.0 - arg > CLAMP_WARN {
            warn!("arccosh argument {arg} clamped to 1 (ill-conditioned inputs)");
        }
        return 0.0;
    }
    arg.acosh()
}

/// Projects an ambient `(n+1)`-vector onto the tangent space at `p`:
/// `v + kappa <p, v>_L p`.
pub fn tangent_project(p: &CurvedPoint, v: &[f64]) -> Result<TangentVector> {
    check_dim(p.dim() + 1, v.len())?;
    let pc = p.coords();
    let scale = p.kappa * minkowski(&pc, v);
    let coords = v.iter().zip(&pc).map(|(vi, pi)| vi + scale * pi).collect();
    Ok(TangentVector {
        coords,
        base: p.clone(),
    })
}

/// Exponential map at `p`:
/// `cosh(sqrt(k)|v|) p + sinh(sqrt(k)|v|)/(sqrt(k)|v|) v` with `|v|` the
/// Lorentz norm. For `|v| < SERIES_THRESHOLD` the first-order limit `p + v`
/// is used, which is exactly `p` for the zero vector.
pub fn exp_map(p: &CurvedPoint, v: &TangentVector) -> Result<CurvedPoint> {
    check_dim(p.dim() + 1, v.coords.len())?;
    same_kappa(p.kappa, v.base.kappa)?;
    let sq = minkowski(&v.coords, &v.coords);
    let tol = MEMBERSHIP_TOL * (1.0 + v.euclidean_norm().powi(2));
    if sq < -tol {
        return Err(Error::domain(format!(
            "timelike tangent vector (<v, v>_L = {sq}) has no real exponential"
        )));
    }
    let norm = sq.max(0.0).sqrt();
    if norm == 0.0 && v.coords.iter().all(|c| *c == 0.0) {
        return Ok(p.clone());
    }
    let pc = p.coords();
    let (c, s) = if norm < SERIES_THRESHOLD {
        (1.0, 1.0)
    } else {
        let theta = p.kappa.sqrt() * norm;
        (theta.cosh(), theta.sinh() / theta)
    };
    let spatial: Vec<f64> = pc[1..]
        .iter()
        .zip(&v.coords[1..])
        .map(|(pi, vi)| c * pi + s * vi)
        .collect();
    // recomputing the time coordinate keeps the result exactly on the sheet
    Ok(CurvedPoint::lift_unchecked(spatial, p.kappa))
}

/// Logarithm map at `p`: the initial velocity of the geodesic from `p` to
/// `q`, with Lorentz norm equal to `d(p, q)`.
///
/// The direction is `u = q + kappa <p, q>_L p`; its Lorentz norm is
/// `sinh(sqrt(k) d)/sqrt(k)`, so the scale applied is
/// `sqrt(k) d / sinh(sqrt(k) d)`, evaluated as `d / |u|`.
pub fn log_map(p: &CurvedPoint, q: &CurvedPoint) -> Result<TangentVector> {
    same_kappa(p.kappa, q.kappa)?;
    check_dim(p.dim(), q.dim())?;
    if p.time == q.time && p.spatial == q.spatial {
        return Ok(TangentVector::zero(p));
    }
    let d = distance_unchecked(p, q);
    let u = tangent_project(p, &q.coords())?;
    if d < SERIES_THRESHOLD {
        // scale -> 1 as d -> 0
        return Ok(u);
    }
    let u_norm = u.lorentz_norm();
    if u_norm == 0.0 {
        return Ok(TangentVector::zero(p));
    }
    let scale = d / u_norm;
    Ok(TangentVector {
        coords: u.coords.iter().map(|c| c * scale).collect(),
        base: p.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-12;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(lorentz_inner(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), -1.0);
        let y = [1f64.cosh(), 1f64.sinh(), 0.0];
        let v = lorentz_inner(&[1.0, 0.0, 0.0], &y).unwrap();
        assert!(close(v, -1.5430806348152437, EPS));
        let p = CurvedPoint::lift(&[0.3, -1.2, 4.0], 2.0).unwrap();
        assert!(close(p.inner(&p).unwrap(), -0.5, 1e-12));
    }

    #[test]
    fn inner_rejects_mismatch() {
        assert!(matches!(
            lorentz_inner(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
        assert!(lorentz_inner(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn lift_examples() {
        let apex = CurvedPoint::lift(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(apex.coords(), vec![1.0, 0.0, 0.0]);
        let p = CurvedPoint::lift(&[3.0, 0.0], 1.0).unwrap();
        assert!(close(p.time(), 10f64.sqrt(), EPS));
        let q = CurvedPoint::lift(&[0.0, 0.0], 4.0).unwrap();
        assert_eq!(q.time(), 0.5);
    }

    #[test]
    fn lift_rejects_bad_inputs() {
        assert!(CurvedPoint::lift(&[1.0], 0.0).is_err());
        assert!(CurvedPoint::lift(&[1.0], -1.0).is_err());
        assert!(CurvedPoint::lift(&[f64::NAN], 1.0).is_err());
        assert!(CurvedPoint::lift(&[f64::INFINITY, 0.0], 1.0).is_err());
    }

    #[test]
    fn distance_examples() {
        let p = CurvedPoint::apex(2, 1.0).unwrap();
        assert_eq!(geodesic_distance(&p, &p).unwrap(), 0.0);
        let q = CurvedPoint::lift(&[1f64.sinh(), 0.0], 1.0).unwrap();
        assert!(close(geodesic_distance(&p, &q).unwrap(), 1.0, 1e-12));
        let p4 = CurvedPoint::apex(2, 4.0).unwrap();
        let q4 = CurvedPoint::lift(&[2f64.sinh() / 2.0, 0.0], 4.0).unwrap();
        assert!(close(geodesic_distance(&p4, &q4).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn distance_rejects_curvature_mismatch() {
        let p = CurvedPoint::apex(2, 1.0).unwrap();
        let q = CurvedPoint::apex(2, 2.0).unwrap();
        assert!(matches!(geodesic_distance(&p, &q), Err(Error::Domain(_))));
    }

    #[test]
    fn tangent_projection_examples() {
        let apex = CurvedPoint::apex(2, 1.0).unwrap();
        let t = tangent_project(&apex, &[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(t.coords(), &[0.0, 1.0, 0.0]);

        let p = CurvedPoint::lift(&[0.4, -0.7], 1.0).unwrap();
        let t = tangent_project(&p, &p.coords()).unwrap();
        assert!(t.coords().iter().all(|c| c.abs() < 1e-15));

        let already = t.coords().to_vec();
        let ortho = tangent_project(&p, &[0.0, 0.7, 0.4]).unwrap();
        let again = tangent_project(&p, ortho.coords()).unwrap();
        for (a, b) in ortho.coords().iter().zip(again.coords()) {
            assert!(close(*a, *b, 1e-15));
        }
        assert_eq!(already.len(), 3);
    }

    #[test]
    fn exp_map_examples() {
        let apex = CurvedPoint::apex(2, 1.0).unwrap();
        let zero = TangentVector::zero(&apex);
        assert_eq!(exp_map(&apex, &zero).unwrap(), apex);

        let v = tangent_project(&apex, &[0.0, 1.0, 0.0]).unwrap();
        let q = exp_map(&apex, &v).unwrap();
        assert!(close(q.time(), 1f64.cosh(), 1e-12));
        assert!(close(q.spatial()[0], 1f64.sinh(), 1e-12));
        assert_eq!(q.spatial()[1], 0.0);

        let p = CurvedPoint::lift(&[0.3, 0.5], 1.0).unwrap();
        let raw = tangent_project(&p, &[0.0, 1.0, -2.0]).unwrap();
        let scale = 0.7 / raw.lorentz_norm();
        let coords: Vec<f64> = raw.coords().iter().map(|c| c * scale).collect();
        let v = tangent_project(&p, &coords).unwrap();
        let q = exp_map(&p, &v).unwrap();
        assert!(close(geodesic_distance(&p, &q).unwrap(), 0.7, 1e-10));
    }

    #[test]
    fn exp_map_rejects_timelike() {
        let apex = CurvedPoint::apex(2, 1.0).unwrap();
        let timelike = TangentVector {
            coords: vec![1.0, 0.0, 0.0],
            base: apex.clone(),
        };
        assert!(matches!(exp_map(&apex, &timelike), Err(Error::Domain(_))));
    }

    #[test]
    fn log_map_examples() {
        let p = CurvedPoint::lift(&[1.0, -2.0], 1.5).unwrap();
        let v = log_map(&p, &p).unwrap();
        assert!(v.coords().iter().all(|c| c.abs() < 1e-14));

        let q = CurvedPoint::lift(&[-0.5, 0.25], 1.5).unwrap();
        let v = log_map(&p, &q).unwrap();
        let back = exp_map(&p, &v).unwrap();
        for (a, b) in back.coords().iter().zip(q.coords()) {
            assert!(close(*a, b, 1e-7));
        }
        assert!(close(v.lorentz_norm(), geodesic_distance(&p, &q).unwrap(), 1e-9));
    }

    #[test]
    fn membership_examples() {
        let p = CurvedPoint::lift(&[5.0, -3.0], 0.5).unwrap();
        assert!(is_on_hyperboloid(&p.coords(), 0.5, 1e-8 * 34.0));
        assert!(!is_on_hyperboloid(&[-1.0, 0.0, 0.0], 1.0, 1e-9));
        assert!(!is_on_hyperboloid(&[1.0, 1.0, 0.0], 1.0, 1e-9));
    }

    #[test]
    fn from_coords_validates() {
        assert!(CurvedPoint::from_coords(&[1.0, 0.0], 1.0).is_ok());
        assert!(CurvedPoint::from_coords(&[1.0, 1.0], 1.0).is_err());
    }
}
