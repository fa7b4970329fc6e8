//! Per-anchor prior incorporation: multivariate Gaussian conjugate updates
//! for the box and Dirichlet pseudo-count updates for the category.

use nalgebra::{Cholesky, Matrix4};
use rand::Rng;

use crate::detection::{BoxGaussian, CategoricalDist};
use crate::error::{Error, Result};
use crate::stream::{derive_rng, STREAM_CATEGORY_COUNTS};

/// Prior over the box state.
///
/// The non-informative mode is realized as exactly zero prior precision,
/// which makes the conjugate update the identity on the likelihood.
#[derive(Debug, Clone, PartialEq)]
pub enum BoxPrior {
    NonInformative,
    Gaussian(BoxGaussian),
}

/// Dirichlet pseudo-count vector over K categories.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletState {
    alpha: Vec<f64>,
}

impl DirichletState {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::invalid("Dirichlet needs at least 2 categories"));
        }
        if !alpha.iter().all(|a| a.is_finite() && *a > 0.0) {
            return Err(Error::invalid("Dirichlet pseudo-counts must be positive"));
        }
        Ok(Self { alpha })
    }

    /// Flat prior with unit pseudo-counts.
    pub fn flat(k: usize) -> Result<Self> {
        Self::new(vec![1.0; k])
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn total_mass(&self) -> f64 {
        self.alpha.iter().sum()
    }
}

/// How categorical observations are converted into pseudo-counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    /// Deterministic surrogate: add `budget * p_k` real-valued counts.
    Expected,
    /// Draw `budget` i.i.d. category indices and add integer counts.
    Sampled,
}

/// Sample budget and sampling policy for categorical count updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryCountConfig {
    /// Number of pseudo-observations contributed per update.
    pub budget: u32,
    pub mode: CountMode,
    /// Root seed; the per-anchor stream is derived from (seed, anchor id).
    pub seed: u64,
}

impl CategoryCountConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::invalid("count budget must be at least 1"));
        }
        Ok(())
    }
}

impl Default for CategoryCountConfig {
    fn default() -> Self {
        Self {
            budget: 30,
            mode: CountMode::Expected,
            seed: 0,
        }
    }
}

fn precision(cov: &Matrix4<f64>, what: &str) -> Result<(Cholesky<f64, nalgebra::Const<4>>, Matrix4<f64>)> {
    let chol = Cholesky::new(*cov)
        .ok_or_else(|| Error::numerical(format!("singular {what} covariance")))?;
    let inv = chol.inverse();
    Ok((chol, inv))
}

/// Multivariate Gaussian conjugate update of a box prior with a likelihood.
///
/// Posterior covariance is the inverse of the summed precisions and the
/// posterior mean is the precision-weighted combination of the means. With
/// a non-informative prior the likelihood is returned unchanged.
pub fn gaussian_conjugate_update(prior: &BoxPrior, likelihood: &BoxGaussian) -> Result<BoxGaussian> {
    match prior {
        BoxPrior::NonInformative => Ok(likelihood.clone()),
        BoxPrior::Gaussian(p) => {
            let (_, prior_prec) = precision(p.cov(), "prior")?;
            let (_, like_prec) = precision(likelihood.cov(), "likelihood")?;
            let post_prec = prior_prec + like_prec;
            let chol = Cholesky::new(post_prec)
                .ok_or_else(|| Error::numerical("posterior precision not positive definite"))?;
            let cov = chol.inverse();
            let info = prior_prec * p.mean() + like_prec * likelihood.mean();
            let mean = chol.solve(&info);
            BoxGaussian::new(mean, cov)
        }
    }
}

/// Draws `n` i.i.d. category indices from `category` on the stream derived
/// from `(seed, stream_id)` and returns per-category counts.
///
/// Sampling walks the cumulative distribution with one uniform draw per
/// observation, so a replay of the same stream reproduces the counts.
pub fn sample_category_counts(
    category: &CategoricalDist,
    n: u32,
    seed: u64,
    stream_id: u64,
) -> Vec<u64> {
    let probs = category.probs();
    let mut rng = derive_rng(seed, &[STREAM_CATEGORY_COUNTS, stream_id]);
    let mut counts = vec![0u64; probs.len()];
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = probs.len() - 1;
        for (j, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                idx = j;
                break;
            }
        }
        counts[idx] += 1;
    }
    counts
}

/// Dirichlet posterior after observing one categorical distribution.
///
/// `stream_id` (the anchor id) selects the sampling stream in
/// [`CountMode::Sampled`]; it is ignored in expected mode. The total added
/// mass equals the budget in both modes.
pub fn dirichlet_posterior(
    prior: &DirichletState,
    category: &CategoricalDist,
    cfg: &CategoryCountConfig,
    stream_id: u64,
) -> Result<DirichletState> {
    cfg.validate()?;
    if prior.len() != category.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} pseudo-counts vs {} probabilities",
            prior.len(),
            category.len()
        )));
    }
    let mut alpha = prior.alpha.clone();
    match cfg.mode {
        CountMode::Expected => {
            let h = f64::from(cfg.budget);
            for (a, &p) in alpha.iter_mut().zip(category.probs()) {
                *a += h * p;
            }
        }
        CountMode::Sampled => {
            let counts = sample_category_counts(category, cfg.budget, cfg.seed, stream_id);
            for (a, c) in alpha.iter_mut().zip(counts) {
                *a += c as f64;
            }
        }
    }
    DirichletState::new(alpha)
}

/// Mean of the Dirichlet: normalized pseudo-counts.
pub fn dirichlet_mean(d: &DirichletState) -> CategoricalDist {
    let total = d.total_mass();
    let probs: Vec<f64> = d.alpha.iter().map(|a| a / total).collect();
    CategoricalDist::new(probs).expect("normalized pseudo-counts lie on the simplex")
}

/// Non-informative priors: zero-precision box prior and a flat Dirichlet.
pub fn make_noninformative(k: usize) -> Result<(BoxPrior, DirichletState)> {
    Ok((BoxPrior::NonInformative, DirichletState::flat(k)?))
}
