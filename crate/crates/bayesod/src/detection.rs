//! Core geometric and probabilistic value types: boxes, box Gaussians,
//! categorical distributions and their entropies.
//!
//! All types are immutable values validated at construction; every operation
//! here is a pure function and safe to call concurrently.

use nalgebra::{Cholesky, Matrix4, Vector4};

use crate::error::{Error, Result};

/// Relative tolerance for covariance symmetry at construction.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Tolerance on probability vectors summing to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Axis-aligned box in real-valued pixel coordinates, stored as top-left
/// (x1, y1) and bottom-right (x2, y2) corners.
///
/// Invariants: `x1 <= x2`, `y1 <= y2`, all coordinates finite. Zero-area
/// boxes are legal values; the fusion pipeline rejects them as degenerate
/// detections, but `iou` accepts them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box coordinates must be finite"));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::invalid(format!(
                "box corners out of order: ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from a corner vector in (x1, y1, x2, y2) order.
    pub fn from_corners(v: &Vector4<f64>) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Corner vector in (x1, y1, x2, y2) order.
    pub fn corners(&self) -> Vector4<f64> {
        Vector4::new(self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union of two boxes.
///
/// Returns 0 for disjoint boxes and for zero-area boxes that are not
/// identical; identical boxes (including degenerate ones) score 1.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        // both boxes degenerate; only exact coincidence counts as overlap
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Validates a 4x4 covariance: finite, symmetric within [`SYMMETRY_TOL`]
/// (relative to the largest entry), positive definite via Cholesky.
///
/// Returns the exactly symmetrized matrix `(A + A^T) / 2`.
pub(crate) fn validate_covariance(cov: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("covariance entries must be finite"));
    }
    let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for i in 0..4 {
        for j in (i + 1)..4 {
            if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!(
                    "covariance not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let sym = (cov + cov.transpose()) * 0.5;
    if Cholesky::new(sym).is_none() {
        return Err(Error::numerical(
            "covariance is not positive definite (Cholesky failed)",
        ));
    }
    Ok(sym)
}

/// 4-D Gaussian over box corner coordinates (x1, y1, x2, y2).
///
/// The covariance is stored exactly symmetric and is guaranteed positive
/// definite: construction fails unless a Cholesky factorization succeeds,
/// with no tolerance slack. Callers that need to repair a near-singular
/// matrix regularize it first (see [`crate::fusion::regularize`]).
#[derive(Debug, Clone, PartialEq)]
pub struct BoxGaussian {
    mean: Vector4<f64>,
    cov: Matrix4<f64>,
}

impl BoxGaussian {
    pub fn new(mean: Vector4<f64>, cov: Matrix4<f64>) -> Result<Self> {
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box Gaussian mean must be finite"));
        }
        let cov = validate_covariance(&cov)?;
        Ok(Self { mean, cov })
    }

    pub fn mean(&self) -> &Vector4<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix4<f64> {
        &self.cov
    }

    pub(crate) fn cholesky(&self) -> Cholesky<f64, nalgebra::Const<4>> {
        // cannot fail: the same factorization succeeded at construction
        Cholesky::new(self.cov).expect("covariance validated at construction")
    }
}

/// Differential entropy of a 4-D box Gaussian in nats:
/// `0.5 * ln((2*pi*e)^4 * det(cov))`.
pub fn gaussian_entropy(g: &BoxGaussian) -> f64 {
    let chol = g.cholesky();
    let log_det: f64 = (0..4).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    2.0 * two_pi_e.ln() + 0.5 * log_det
}

/// Categorical distribution over K categories.
///
/// Invariants: at least two categories, entries in [0, 1], entries summing
/// to one within [`PROB_SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("categorical needs at least 2 categories"));
        }
        if !probs.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the largest probability; ties break to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Shannon entropy in nats, with the `0 * ln 0 = 0` convention.
pub fn categorical_entropy(c: &CategoricalDist) -> f64 {
    c.probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Ordered category labels, optionally designating one as background.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTable {
    names: Vec<String>,
    background_index: Option<usize>,
}

impl CategoryTable {
    pub fn new(names: Vec<String>, background_index: Option<usize>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::invalid("need at least 2 categories"));
        }
        for i in 0..names.len() {
            if names[i + 1..].contains(&names[i]) {
                return Err(Error::invalid(format!(
                    "duplicate category name {:?}",
                    names[i]
                )));
            }
        }
        if let Some(b) = background_index {
            if b >= names.len() {
                return Err(Error::invalid("background index out of range"));
            }
        }
        Ok(Self {
            names,
            background_index,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn background_index(&self) -> Option<usize> {
        self.background_index
    }

    pub fn is_foreground(&self, index: usize) -> bool {
        self.background_index != Some(index)
    }
}
