//! Fisher-Rao geometry of the probability simplex.
//!
//! The square-root embedding phi(p)_i = sqrt(p_i) maps the simplex onto the
//! first orthant of the unit sphere, where the Fisher-Rao metric becomes the
//! round sphere metric up to a factor of two:
//!
//!   d_FR(p, q) = 2 * arccos(sum_i sqrt(p_i * q_i))
//!
//! Geodesics are great circles, so interpolation is spherical linear
//! interpolation of the embedded points. The specialization index FSI is the
//! Fisher-Rao distance between a routing marginal and the uniform
//! distribution; it is bounded by `fsi_max(n) = 2 * arccos(1/sqrt(n))`.
//!
//! All operations accept points on the closed simplex (zero entries are
//! fine), and every sum over simplex coordinates uses an order-independent
//! compensated sum so that relabeling experts cannot change any metric even
//! in the last bit.

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, stable_sum, Mat};
use crate::{Error, Result};

/// Tolerance used when validating that probabilities sum to one.
const SUM_TOLERANCE: f64 = 1e-6;

/// Inner products within this distance of 1 are treated as exactly coincident
/// points, so the distance returns exactly zero instead of a noise-sized value.
const COINCIDENT_GUARD: f64 = 1e-12;

/// A point on the probability simplex: non-negative entries summing to one.
///
/// Construction validates and then renormalizes, so downstream code can rely
/// on the sum being 1 up to machine precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector {
    values: Vec<f64>,
}

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidProbability("empty vector".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidProbability(format!(
                    "entry {i} is not finite: {v}"
                )));
            }
            if *v < 0.0 {
                return Err(Error::InvalidProbability(format!(
                    "entry {i} is negative: {v}"
                )));
            }
        }
        let sum = stable_sum(&values);
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidProbability(format!(
                "entries sum to {sum}, outside 1 +/- {SUM_TOLERANCE}"
            )));
        }
        let values = values.into_iter().map(|v| v / sum).collect();
        Ok(ProbabilityVector { values })
    }

    /// The uniform distribution over `n` outcomes.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidProbability("empty vector".into()));
        }
        Ok(ProbabilityVector {
            values: vec![1.0 / n as f64; n],
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        ProbabilityVector::new(values)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(p: ProbabilityVector) -> Vec<f64> {
        p.values
    }
}

/// A point on the unit sphere with non-negative coordinates (the image of the
/// simplex under the square-root embedding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphericalPoint {
    coords: Vec<f64>,
}

impl SphericalPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("spherical point: empty vector"));
        }
        for (i, v) in coords.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::invalid(format!(
                    "spherical point: coordinate {i} = {v} must be finite and non-negative"
                )));
            }
        }
        let norm2 = dot(&coords, &coords);
        if (norm2 - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "spherical point: squared norm {norm2} deviates from 1 by more than 1e-9"
            )));
        }
        Ok(SphericalPoint { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Embeds a simplex point onto the unit sphere: phi(p)_i = sqrt(p_i).
pub fn sqrt_embed(p: &ProbabilityVector) -> SphericalPoint {
    SphericalPoint {
        coords: p.values.iter().map(|v| v.sqrt()).collect(),
    }
}

/// Shared arccos guard: clamps into [-1, 1] and snaps near-coincident points
/// (argument within 1e-12 of 1) to a distance of exactly zero.
fn double_arccos(x: f64) -> f64 {
    if x >= 1.0 - COINCIDENT_GUARD {
        0.0
    } else {
        2.0 * x.clamp(-1.0, 1.0).acos()
    }
}

/// Fisher-Rao distance between two simplex points, in [0, pi].
pub fn fisher_rao_distance(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            context: "fisher_rao_distance",
            expected: p.len(),
            got: q.len(),
        });
    }
    let products: Vec<f64> = p
        .values
        .iter()
        .zip(&q.values)
        .map(|(a, b)| (a * b).sqrt())
        .collect();
    Ok(double_arccos(stable_sum(&products)))
}

/// Specialization index: Fisher-Rao distance from `p` to the uniform
/// distribution, computed as 2 * arccos(sum_i sqrt(p_i) / sqrt(n)).
///
/// Exactly permutation invariant (the sum over entries is order-independent).
pub fn fsi(p: &ProbabilityVector) -> f64 {
    let roots: Vec<f64> = p.values.iter().map(|v| v.sqrt()).collect();
    let n = p.len() as f64;
    double_arccos(stable_sum(&roots) / n.sqrt())
}

/// Largest attainable FSI for n experts: the distance from a simplex vertex
/// to the uniform distribution, 2 * arccos(1/sqrt(n)).
pub fn fsi_max(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "fsi_max requires at least 2 experts, got {n}"
        )));
    }
    Ok(2.0 * (1.0 / (n as f64).sqrt()).acos())
}

/// FSI scaled into [0, 1] by its maximum for the given dimension.
pub fn fsi_normalized(p: &ProbabilityVector) -> Result<f64> {
    Ok(fsi(p) / fsi_max(p.len())?)
}

/// Point a fraction `s` of the way along the Fisher-Rao geodesic from `p`
/// to `q` (spherical linear interpolation of the embedded points).
pub fn geodesic_interpolate(
    p: &ProbabilityVector,
    q: &ProbabilityVector,
    s: f64,
) -> Result<ProbabilityVector> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            context: "geodesic_interpolate",
            expected: p.len(),
            got: q.len(),
        });
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!(
            "geodesic_interpolate: s = {s} outside [0, 1]"
        )));
    }
    if s == 0.0 {
        return Ok(p.clone());
    }
    if s == 1.0 {
        return Ok(q.clone());
    }
    let a = sqrt_embed(p);
    let b = sqrt_embed(q);
    let products: Vec<f64> = a.coords.iter().zip(&b.coords).map(|(x, y)| x * y).collect();
    let cos_omega = stable_sum(&products).clamp(-1.0, 1.0);
    let omega = cos_omega.acos();
    if omega < COINCIDENT_GUARD {
        return Ok(p.clone());
    }
    let sin_omega = omega.sin();
    let ca = ((1.0 - s) * omega).sin() / sin_omega;
    let cb = (s * omega).sin() / sin_omega;
    let values: Vec<f64> = a
        .coords
        .iter()
        .zip(&b.coords)
        .map(|(x, y)| {
            let c = ca * x + cb * y;
            c * c
        })
        .collect();
    ProbabilityVector::new(values)
}

/// Temperature softmax with max-subtraction for overflow safety.
pub fn softmax(logits: &[f64], tau: f64) -> Result<ProbabilityVector> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax: empty logits"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "softmax: temperature must be positive, got {tau}"
        )));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "softmax: non-finite logit {bad}"
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|w| ((w - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbabilityVector::new(exps.into_iter().map(|e| e / sum).collect())
}

/// Jacobian of the temperature softmax:
/// J = (1/tau) * (diag(p) - p p^T), with p = softmax(logits, tau).
///
/// Rows and columns sum to zero; tau * J + p p^T = diag(p) holds exactly, and
/// the Fisher-weighted product tau^2 * J * diag(1/p) * J^T + p p^T = diag(p)
/// recovers the inverse simplex Fisher metric on the support.
pub fn softmax_jacobian(logits: &[f64], tau: f64) -> Result<Mat> {
    let p = softmax(logits, tau)?;
    let n = p.len();
    let mut j = Mat::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let delta = if r == c { p.values[r] } else { 0.0 };
            j.set(r, c, (delta - p.values[r] * p.values[c]) / tau);
        }
    }
    Ok(j)
}

/// Exponential map on the unit sphere: follows the great circle from `base`
/// with initial velocity `tangent` for unit time.
fn sphere_exp(base: &[f64], tangent: &[f64]) -> Vec<f64> {
    let speed = crate::linalg::norm2(tangent);
    if speed == 0.0 {
        return base.to_vec();
    }
    let (sin_s, cos_s) = speed.sin_cos();
    base.iter()
        .zip(tangent)
        .map(|(b, t)| cos_s * b + sin_s * t / speed)
        .collect()
}

/// Euclidean distance between the observed next embedded point and the
/// great-circle continuation of the predicted tangent from the previous one.
///
/// `predicted_tangent` must lie in the tangent space at `phi_prev` (inner
/// product within 1e-8); it is re-projected before use so that rounding in
/// the caller cannot introduce a radial component.
pub fn geodesic_step_deviation(
    phi_prev: &SphericalPoint,
    phi_next: &SphericalPoint,
    predicted_tangent: &[f64],
) -> Result<f64> {
    let n = phi_prev.len();
    if phi_next.len() != n {
        return Err(Error::DimensionMismatch {
            context: "geodesic_step_deviation: points",
            expected: n,
            got: phi_next.len(),
        });
    }
    if predicted_tangent.len() != n {
        return Err(Error::DimensionMismatch {
            context: "geodesic_step_deviation: tangent",
            expected: n,
            got: predicted_tangent.len(),
        });
    }
    if predicted_tangent.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "geodesic_step_deviation: non-finite tangent",
        ));
    }
    let radial = dot(predicted_tangent, &phi_prev.coords);
    if radial.abs() > 1e-8 {
        return Err(Error::invalid(format!(
            "geodesic_step_deviation: tangent has radial component {radial} (limit 1e-8)"
        )));
    }
    let projected: Vec<f64> = predicted_tangent
        .iter()
        .zip(&phi_prev.coords)
        .map(|(t, b)| t - radial * b)
        .collect();
    let endpoint = sphere_exp(&phi_prev.coords, &projected);
    let dist2: f64 = phi_next
        .coords
        .iter()
        .zip(&endpoint)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(dist2.sqrt())
}

/// Per-step geodesic deviation bound: eta^2 * grad_norm^2 / (16 * tau).
pub fn geodesic_bound(eta: f64, grad_norm: f64, tau: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::invalid(format!(
            "geodesic_bound: learning rate must be positive, got {eta}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "geodesic_bound: temperature must be positive, got {tau}"
        )));
    }
    if !grad_norm.is_finite() || grad_norm < 0.0 {
        return Err(Error::invalid(format!(
            "geodesic_bound: gradient norm must be finite and non-negative, got {grad_norm}"
        )));
    }
    Ok(eta * eta * grad_norm * grad_norm / (16.0 * tau))
}
