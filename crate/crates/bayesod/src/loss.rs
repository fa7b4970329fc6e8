//! Regression loss kernels with LDL covariance parametrization and
//! finite-difference gradient verification.
//!
//! Three losses operate on a prediction/target pair:
//! - `diag_nll`: per-dimension Gaussian negative log likelihood with a
//!   diagonal variance vector;
//! - `mv_nll`: full multivariate Gaussian negative log likelihood with the
//!   covariance given as unit-lower-triangular L and diagonal D;
//! - `ldl_surrogate`: the Frobenius-factored surrogate
//!   `0.5 * ||L^-1||_F^2 * ||D^-1/2 r||^2 + 0.5 * tr(log D)`.
//!
//! Losses are pointwise (per anchor); batch reduction is the caller's
//! concern. D is parametrized by its logarithm so positivity is structural.

use nalgebra::Matrix4;

use crate::error::{Error, Result};

/// Bound on `log_d` entries keeping `exp(log_d)` finite and positive.
const LOG_D_LIMIT: f64 = 700.0;

/// LDL factors of a 4x4 covariance: the six strictly-lower entries of the
/// unit-diagonal L in row-major order ((1,0), (2,0), (2,1), (3,0), (3,1),
/// (3,2)) and the logarithms of the D diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdlFactors {
    l_strict: [f64; 6],
    log_d: [f64; 4],
}

impl LdlFactors {
    pub fn new(l_strict: [f64; 6], log_d: [f64; 4]) -> Result<Self> {
        if !l_strict.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("L entries must be finite"));
        }
        if !log_d.iter().all(|v| v.is_finite() && v.abs() <= LOG_D_LIMIT) {
            return Err(Error::invalid("log D entries must be finite and bounded"));
        }
        Ok(Self { l_strict, log_d })
    }

    pub fn identity() -> Self {
        Self {
            l_strict: [0.0; 6],
            log_d: [0.0; 4],
        }
    }

    pub fn l_strict(&self) -> &[f64; 6] {
        &self.l_strict
    }

    pub fn log_d(&self) -> &[f64; 4] {
        &self.log_d
    }

    /// The unit lower-triangular L as a dense matrix.
    pub fn unit_lower(&self) -> [[f64; 4]; 4] {
        let l = &self.l_strict;
        [
            [1.0, 0.0, 0.0, 0.0],
            [l[0], 1.0, 0.0, 0.0],
            [l[1], l[2], 1.0, 0.0],
            [l[3], l[4], l[5], 1.0],
        ]
    }

    pub fn d(&self) -> [f64; 4] {
        self.log_d.map(f64::exp)
    }
}

/// Covariance parameter of a loss sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovParam {
    /// Per-dimension variances for the diagonal loss.
    Diagonal([f64; 4]),
    /// LDL factors for the multivariate losses.
    Factors(LdlFactors),
}

/// One regression sample: prediction, target, and covariance parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSample {
    pub prediction: [f64; 4],
    pub target: [f64; 4],
    pub cov: CovParam,
}

impl LossSample {
    pub fn diagonal(prediction: [f64; 4], target: [f64; 4], variance: [f64; 4]) -> Result<Self> {
        for v in [&prediction, &target] {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::invalid("sample vectors must be finite"));
            }
        }
        if !variance.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::invalid("variances must be positive"));
        }
        Ok(Self {
            prediction,
            target,
            cov: CovParam::Diagonal(variance),
        })
    }

    pub fn multivariate(prediction: [f64; 4], target: [f64; 4], factors: LdlFactors) -> Result<Self> {
        for v in [&prediction, &target] {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::invalid("sample vectors must be finite"));
            }
        }
        Ok(Self {
            prediction,
            target,
            cov: CovParam::Factors(factors),
        })
    }

    fn residual(&self) -> [f64; 4] {
        std::array::from_fn(|i| self.prediction[i] - self.target[i])
    }

    fn variance(&self) -> Result<&[f64; 4]> {
        match &self.cov {
            CovParam::Diagonal(v) => Ok(v),
            CovParam::Factors(_) => Err(Error::invalid(
                "loss requires per-dimension variances, got LDL factors",
            )),
        }
    }

    fn factors(&self) -> Result<&LdlFactors> {
        match &self.cov {
            CovParam::Factors(f) => Ok(f),
            CovParam::Diagonal(_) => Err(Error::invalid(
                "loss requires LDL factors, got per-dimension variances",
            )),
        }
    }
}

/// Loss selector used by the CLI and the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Diagonal,
    Multivariate,
    Surrogate,
}

/// Per-dimension Gaussian negative log likelihood:
/// `sum_d [ r_d^2 / (2 s_d) + 0.5 ln s_d ]` with `s_d` the variance.
pub fn diag_nll(sample: &LossSample) -> Result<f64> {
    let var = sample.variance()?;
    let r = sample.residual();
    let mut total = 0.0;
    for d in 0..4 {
        total += r[d] * r[d] / (2.0 * var[d]) + 0.5 * var[d].ln();
    }
    Ok(total)
}

/// Solves `L u = r` for unit lower-triangular L (forward substitution).
fn forward_solve(l: &[[f64; 4]; 4], r: &[f64; 4]) -> [f64; 4] {
    let mut u = [0.0; 4];
    for i in 0..4 {
        let mut acc = r[i];
        for j in 0..i {
            acc -= l[i][j] * u[j];
        }
        u[i] = acc;
    }
    u
}

/// Solves `L^T v = w` for unit lower-triangular L (backward substitution).
fn backward_solve(l: &[[f64; 4]; 4], w: &[f64; 4]) -> [f64; 4] {
    let mut v = [0.0; 4];
    for i in (0..4).rev() {
        let mut acc = w[i];
        for j in (i + 1)..4 {
            acc -= l[j][i] * v[j];
        }
        v[i] = acc;
    }
    v
}

/// Explicit inverse of a 4x4 unit lower-triangular matrix.
fn unit_lower_inverse(l: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut inv = [[0.0; 4]; 4];
    for col in 0..4 {
        let mut e = [0.0; 4];
        e[col] = 1.0;
        let u = forward_solve(l, &e);
        for row in 0..4 {
            inv[row][col] = u[row];
        }
    }
    inv
}

/// Multivariate Gaussian negative log likelihood with covariance
/// `L D L^T`: `0.5 r^T (L D L^T)^-1 r + 0.5 log det`, where the log
/// determinant is the sum of `log_d` (L has unit diagonal).
pub fn mv_nll(sample: &LossSample) -> Result<f64> {
    let f = sample.factors()?;
    let l = f.unit_lower();
    let d = f.d();
    let u = forward_solve(&l, &sample.residual());
    let quad: f64 = (0..4).map(|i| u[i] * u[i] / d[i]).sum();
    let log_det: f64 = f.log_d.iter().sum();
    Ok(0.5 * quad + 0.5 * log_det)
}

/// Surrogate loss `0.5 ||L^-1||_F^2 ||D^-1/2 r||^2 + 0.5 tr(log D)`.
///
/// For identical D entries this upper-bounds `mv_nll` by Cauchy-Schwarz;
/// for anisotropic D the ordering can flip (see the paired property test,
/// which reports violations rather than hiding them).
pub fn ldl_surrogate(sample: &LossSample) -> Result<f64> {
    let f = sample.factors()?;
    let l = f.unit_lower();
    let d = f.d();
    let inv = unit_lower_inverse(&l);
    let fro2: f64 = inv.iter().flatten().map(|v| v * v).sum();
    let r = sample.residual();
    let whitened2: f64 = (0..4).map(|i| r[i] * r[i] / d[i]).sum();
    let log_det: f64 = f.log_d.iter().sum();
    Ok(0.5 * fro2 * whitened2 + 0.5 * log_det)
}

/// Evaluates the selected loss.
pub fn loss_value(kind: LossKind, sample: &LossSample) -> Result<f64> {
    match kind {
        LossKind::Diagonal => diag_nll(sample),
        LossKind::Multivariate => mv_nll(sample),
        LossKind::Surrogate => ldl_surrogate(sample),
    }
}

/// Reassembles the covariance `L D L^T` from its factors.
pub fn ldl_compose(factors: &LdlFactors) -> Matrix4<f64> {
    let l = factors.unit_lower();
    let d = factors.d();
    let mut out = Matrix4::zeros();
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += l[i][k] * d[k] * l[j][k];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Standard LDL factorization (no pivoting) of a symmetric PD 4x4 matrix.
pub fn ldl_factorize(m: &Matrix4<f64>) -> Result<LdlFactors> {
    let mut l = [[0.0f64; 4]; 4];
    let mut d = [0.0f64; 4];
    for i in 0..4 {
        l[i][i] = 1.0;
    }
    for j in 0..4 {
        let mut dj = m[(j, j)];
        for k in 0..j {
            dj -= l[j][k] * l[j][k] * d[k];
        }
        if dj <= 0.0 || !dj.is_finite() {
            return Err(Error::numerical("matrix is not positive definite"));
        }
        d[j] = dj;
        for i in (j + 1)..4 {
            let mut acc = m[(i, j)];
            for k in 0..j {
                acc -= l[i][k] * l[j][k] * d[k];
            }
            l[i][j] = acc / dj;
        }
    }
    LdlFactors::new(
        [l[1][0], l[2][0], l[2][1], l[3][0], l[3][1], l[3][2]],
        d.map(f64::ln),
    )
}

/// Gradient of the diagonal loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagGrad {
    pub prediction: [f64; 4],
    pub variance: [f64; 4],
}

/// Gradient of an LDL-parametrized loss with respect to the prediction, the
/// strict L entries, and `log_d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdlGrad {
    pub prediction: [f64; 4],
    pub l_strict: [f64; 6],
    pub log_d: [f64; 4],
}

pub fn diag_nll_grad(sample: &LossSample) -> Result<DiagGrad> {
    let var = sample.variance()?;
    let r = sample.residual();
    let prediction = std::array::from_fn(|d| r[d] / var[d]);
    let variance =
        std::array::from_fn(|d| -r[d] * r[d] / (2.0 * var[d] * var[d]) + 0.5 / var[d]);
    Ok(DiagGrad {
        prediction,
        variance,
    })
}

/// Index pairs of the strict lower entries in row-major order.
const L_STRICT_POS: [(usize, usize); 6] = [(1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2)];

pub fn mv_nll_grad(sample: &LossSample) -> Result<LdlGrad> {
    let f = sample.factors()?;
    let l = f.unit_lower();
    let d = f.d();
    let u = forward_solve(&l, &sample.residual());
    let scaled = std::array::from_fn(|i| u[i] / d[i]);
    // w = L^-T D^-1 u is also the gradient w.r.t. the prediction
    let w = backward_solve(&l, &scaled);
    let l_strict = std::array::from_fn(|n| {
        let (j, k) = L_STRICT_POS[n];
        -u[k] * w[j]
    });
    let log_d = std::array::from_fn(|i| 0.5 * (1.0 - u[i] * u[i] / d[i]));
    Ok(LdlGrad {
        prediction: w,
        l_strict,
        log_d,
    })
}

pub fn ldl_surrogate_grad(sample: &LossSample) -> Result<LdlGrad> {
    let f = sample.factors()?;
    let l = f.unit_lower();
    let d = f.d();
    let inv = unit_lower_inverse(&l);
    let fro2: f64 = inv.iter().flatten().map(|v| v * v).sum();
    let r = sample.residual();
    let whitened2: f64 = (0..4).map(|i| r[i] * r[i] / d[i]).sum();

    let prediction = std::array::from_fn(|i| fro2 * r[i] / d[i]);
    // d||M||_F^2 / dl_jk = -2 (M M^T M)_kj with M = L^-1
    let mut mmt_m = [[0.0f64; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            let mut acc = 0.0;
            for p in 0..4 {
                for q in 0..4 {
                    acc += inv[a][p] * inv[q][p] * inv[q][b];
                }
            }
            mmt_m[a][b] = acc;
        }
    }
    let l_strict = std::array::from_fn(|n| {
        let (j, k) = L_STRICT_POS[n];
        -mmt_m[k][j] * whitened2
    });
    let log_d = std::array::from_fn(|i| 0.5 - 0.5 * fro2 * r[i] * r[i] / d[i]);
    Ok(LdlGrad {
        prediction,
        l_strict,
        log_d,
    })
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compares the analytic gradients of the selected loss against central
/// finite differences over every parameter (prediction and
/// variance/factors) and returns the maximum relative error.
pub fn grad_check(kind: LossKind, sample: &LossSample, step: f64) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("step must be positive"));
    }
    let eval = |s: &LossSample| loss_value(kind, s);
    let mut max_err: f64 = 0.0;

    // prediction entries
    let pred_grad: [f64; 4] = match kind {
        LossKind::Diagonal => diag_nll_grad(sample)?.prediction,
        LossKind::Multivariate => mv_nll_grad(sample)?.prediction,
        LossKind::Surrogate => ldl_surrogate_grad(sample)?.prediction,
    };
    for d in 0..4 {
        let mut hi = *sample;
        let mut lo = *sample;
        hi.prediction[d] += step;
        lo.prediction[d] -= step;
        let numeric = (eval(&hi)? - eval(&lo)?) / (2.0 * step);
        max_err = max_err.max(rel_err(pred_grad[d], numeric));
    }

    match (kind, &sample.cov) {
        (LossKind::Diagonal, CovParam::Diagonal(var)) => {
            let grad = diag_nll_grad(sample)?.variance;
            for d in 0..4 {
                let mut vhi = *var;
                let mut vlo = *var;
                vhi[d] += step;
                vlo[d] -= step;
                let hi = LossSample {
                    cov: CovParam::Diagonal(vhi),
                    ..*sample
                };
                let lo = LossSample {
                    cov: CovParam::Diagonal(vlo),
                    ..*sample
                };
                let numeric = (eval(&hi)? - eval(&lo)?) / (2.0 * step);
                max_err = max_err.max(rel_err(grad[d], numeric));
            }
        }
        (_, CovParam::Factors(f)) => {
            let grad = match kind {
                LossKind::Multivariate => mv_nll_grad(sample)?,
                LossKind::Surrogate => ldl_surrogate_grad(sample)?,
                LossKind::Diagonal => unreachable!("diagonal loss has no factors"),
            };
            for n in 0..6 {
                let mut fhi = *f;
                let mut flo = *f;
                fhi.l_strict[n] += step;
                flo.l_strict[n] -= step;
                let hi = LossSample {
                    cov: CovParam::Factors(fhi),
                    ..*sample
                };
                let lo = LossSample {
                    cov: CovParam::Factors(flo),
                    ..*sample
                };
                let numeric = (eval(&hi)? - eval(&lo)?) / (2.0 * step);
                max_err = max_err.max(rel_err(grad.l_strict[n], numeric));
            }
            for n in 0..4 {
                let mut fhi = *f;
                let mut flo = *f;
                fhi.log_d[n] += step;
                flo.log_d[n] -= step;
                let hi = LossSample {
                    cov: CovParam::Factors(fhi),
                    ..*sample
                };
                let lo = LossSample {
                    cov: CovParam::Factors(flo),
                    ..*sample
                };
                let numeric = (eval(&hi)? - eval(&lo)?) / (2.0 * step);
                max_err = max_err.max(rel_err(grad.log_d[n], numeric));
            }
        }
        (kind, cov) => {
            return Err(Error::invalid(format!(
                "gradient check for {kind:?} does not match parameter kind {cov:?}"
            )));
        }
    }
    Ok(max_err)
}
