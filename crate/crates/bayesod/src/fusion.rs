//! The NMS replacement: greedy IoU clustering of per-anchor posteriors,
//! closed-form Gaussian and Dirichlet fusion of every cluster member, a
//! classical NMS baseline, and the ablation switchboard.

use nalgebra::{Cholesky, Matrix4, Vector4};

use crate::detection::{
    categorical_entropy, gaussian_entropy, iou, BoundingBox, BoxGaussian, CategoricalDist,
};
use crate::error::{Error, Result};
use crate::mc::{
    aggregate_box, aggregate_categorical, combine_covariance, AnchorBelief, AnchorPrediction,
};
use crate::priors::{
    dirichlet_mean, dirichlet_posterior, gaussian_conjugate_update, BoxPrior, CategoryCountConfig,
    DirichletState,
};

/// Inference mode: full Bayesian fusion or the classical keep-the-center
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    BayesOd,
    Nms,
}

/// Which aleatoric covariance entries enter the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceMode {
    Full,
    /// Off-diagonal aleatoric entries are zeroed before the covariance sum.
    Diagonal,
}

/// Full pipeline configuration, including the ablation switches.
#[derive(Debug, Clone)]
pub struct FusionConfig {
    /// IoU at or above which an anchor joins a cluster.
    pub affinity_threshold: f64,
    /// Minimum score an output detection must reach.
    pub score_threshold: f64,
    pub mode: Mode,
    pub covariance: CovarianceMode,
    /// Include the sample covariance of the stochastic runs.
    pub epistemic: bool,
    /// Include the averaged reported aleatoric covariance.
    pub aleatoric: bool,
    pub box_prior: BoxPrior,
    /// Dirichlet prior pseudo-counts; `None` selects the flat prior.
    pub dirichlet_prior: Option<Vec<f64>>,
    pub counts: CategoryCountConfig,
    /// Category index treated as background, if the category set has one.
    pub background_index: Option<usize>,
    /// When set, every prediction must carry exactly this many runs.
    pub expected_runs: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            affinity_threshold: 0.5,
            score_threshold: 0.1,
            mode: Mode::BayesOd,
            covariance: CovarianceMode::Full,
            epistemic: true,
            aleatoric: true,
            box_prior: BoxPrior::NonInformative,
            dirichlet_prior: None,
            counts: CategoryCountConfig::default(),
            background_index: None,
            expected_runs: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.affinity_threshold > 0.0 && self.affinity_threshold < 1.0) {
            return Err(Error::invalid("affinity threshold must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::invalid("score threshold must lie in [0, 1)"));
        }
        if !self.epistemic && !self.aleatoric {
            return Err(Error::invalid(
                "at least one of epistemic/aleatoric must be on",
            ));
        }
        if let Some(alpha) = &self.dirichlet_prior {
            if !alpha.iter().all(|a| a.is_finite() && *a > 0.0) {
                return Err(Error::invalid("Dirichlet prior counts must be positive"));
            }
        }
        self.counts.validate()
    }
}

/// One anchor cluster: the highest-score member is the center.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    /// Index (into the belief list) of the highest-score member.
    pub center_index: usize,
    /// All member indices, center first, others in selection order.
    pub member_indices: Vec<usize>,
}

/// A fused object estimate.
#[derive(Debug, Clone)]
pub struct FinalDetection {
    pub bbox: BoxGaussian,
    pub category: CategoricalDist,
    pub dirichlet: DirichletState,
    /// Highest foreground probability of `category`.
    pub score: f64,
    pub gaussian_entropy: f64,
    pub categorical_entropy: f64,
    /// Anchor ids that contributed, cluster center first.
    pub member_anchor_ids: Vec<u64>,
}

/// Anchor dropped by the pipeline, with the reason, for the sidecar log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedAnchor {
    pub anchor_id: u64,
    pub reason: String,
}

/// Result of running the chain on one image.
#[derive(Debug, Clone, Default)]
pub struct InferenceOutput {
    pub detections: Vec<FinalDetection>,
    pub dropped: Vec<DroppedAnchor>,
}

/// Score used for cluster-center election and output filtering: the highest
/// probability over foreground categories.
pub fn foreground_score(category: &CategoricalDist, background_index: Option<usize>) -> f64 {
    category
        .probs()
        .iter()
        .enumerate()
        .filter(|(k, _)| background_index != Some(*k))
        .map(|(_, &p)| p)
        .fold(0.0, f64::max)
}

/// Adds scale-aware jitter to the diagonal: `1e-6 * trace / 4`.
pub fn regularize(cov: &Matrix4<f64>) -> Matrix4<f64> {
    let eps = 1e-6 * cov.trace() / 4.0;
    cov + Matrix4::identity() * eps
}

/// Cholesky with a single regularization retry; the second failure is a
/// hard numerical error.
fn cholesky_or_repair(
    cov: &Matrix4<f64>,
    what: &str,
) -> Result<(Cholesky<f64, nalgebra::Const<4>>, Matrix4<f64>)> {
    if let Some(c) = Cholesky::new(*cov) {
        return Ok((c, *cov));
    }
    let repaired = regularize(cov);
    match Cholesky::new(repaired) {
        Some(c) => Ok((c, repaired)),
        None => Err(Error::numerical(format!(
            "{what} covariance not positive definite after regularization"
        ))),
    }
}

/// Greedy clustering by spatial affinity.
///
/// Repeatedly selects the highest-score unclustered anchor as a center
/// (score ties break to the lowest anchor id) and absorbs every unclustered
/// anchor whose box-mean IoU with the center reaches the threshold.
pub fn greedy_cluster(
    beliefs: &[AnchorBelief],
    threshold: f64,
    background_index: Option<usize>,
) -> Result<Vec<Cluster>> {
    if beliefs.is_empty() {
        return Err(Error::invalid("cannot cluster an empty belief list"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("cluster threshold must lie in (0, 1)"));
    }
    let boxes: Vec<BoundingBox> = beliefs
        .iter()
        .map(|b| BoundingBox::from_corners(b.bbox.mean()))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = beliefs
        .iter()
        .map(|b| foreground_score(&b.category, background_index))
        .collect();

    let mut unclustered: Vec<usize> = (0..beliefs.len()).collect();
    let mut clusters = Vec::new();
    while !unclustered.is_empty() {
        let center = *unclustered
            .iter()
            .max_by(|&&a, &&b| {
                scores[a]
                    .partial_cmp(&scores[b])
                    .unwrap()
                    .then(beliefs[b].anchor_id.cmp(&beliefs[a].anchor_id))
            })
            .unwrap();
        let mut members = vec![center];
        unclustered.retain(|&i| {
            if i == center {
                return false;
            }
            if iou(&boxes[center], &boxes[i]) >= threshold {
                members.push(i);
                false
            } else {
                true
            }
        });
        clusters.push(Cluster {
            center_index: center,
            member_indices: members,
        });
    }
    Ok(clusters)
}

/// Fuses the cluster center's posterior with the remaining members by
/// precision addition. An empty member list returns the center unchanged.
pub fn fuse_gaussians(center: &BoxGaussian, members: &[BoxGaussian]) -> Result<BoxGaussian> {
    if members.is_empty() {
        return Ok(center.clone());
    }
    let mut prec_sum = Matrix4::zeros();
    let mut info_sum = Vector4::zeros();
    for g in std::iter::once(center).chain(members) {
        let (chol, _) = cholesky_or_repair(g.cov(), "cluster member")?;
        let prec = chol.inverse();
        prec_sum += prec;
        info_sum += prec * g.mean();
    }
    let (chol, prec_sum) = cholesky_or_repair(&prec_sum, "fused precision")?;
    let _ = prec_sum;
    let cov = chol.inverse();
    let mean = chol.solve(&info_sum);
    BoxGaussian::new(mean, cov)
}

/// Folds the categorical observations of the remaining cluster members into
/// the center's Dirichlet posterior. Each member contributes `cfg.budget`
/// counts (expected or sampled); `member_ids` selects the per-member
/// sampling streams.
pub fn fuse_dirichlets(
    center: &DirichletState,
    member_categories: &[CategoricalDist],
    member_ids: &[u64],
    cfg: &CategoryCountConfig,
) -> Result<DirichletState> {
    if member_categories.len() != member_ids.len() {
        return Err(Error::invalid(
            "member categories and ids differ in length",
        ));
    }
    let mut state = center.clone();
    for (cat, &id) in member_categories.iter().zip(member_ids) {
        state = dirichlet_posterior(&state, cat, cfg, id)?;
    }
    Ok(state)
}

struct AnchorPosterior {
    anchor_id: u64,
    /// Per-anchor posterior box (likelihood under the non-informative prior).
    bbox: BoxGaussian,
    /// Aggregated per-run softmax average; what members contribute to fusion.
    raw_category: CategoricalDist,
    /// Per-anchor Dirichlet posterior.
    dirichlet: DirichletState,
}

/// Runs the full chain on the anchors of one image.
///
/// Aggregation (with the covariance/epistemic/aleatoric switches applied) is
/// followed by per-anchor prior updates, greedy clustering on the posterior
/// box means, per-cluster fusion (or center selection in NMS mode), and
/// score/background filtering. Anchors whose posterior mean box is
/// degenerate are dropped and reported in the output.
pub fn infer(preds: &[AnchorPrediction], cfg: &FusionConfig) -> Result<InferenceOutput> {
    cfg.validate()?;
    if preds.is_empty() {
        return Ok(InferenceOutput::default());
    }
    let k = preds[0].num_categories();
    for p in preds {
        if p.num_categories() != k {
            return Err(Error::invalid("predictions disagree on category count"));
        }
        if let Some(t) = cfg.expected_runs {
            if p.runs() != t {
                return Err(Error::invalid(format!(
                    "anchor {} has {} runs, expected {t}",
                    p.anchor_id(),
                    p.runs()
                )));
            }
        }
    }
    if let Some(b) = cfg.background_index {
        if b >= k {
            return Err(Error::invalid("background index out of range"));
        }
    }
    let dirichlet_prior = match &cfg.dirichlet_prior {
        Some(alpha) => {
            if alpha.len() != k {
                return Err(Error::invalid(format!(
                    "Dirichlet prior has {} entries for {k} categories",
                    alpha.len()
                )));
            }
            DirichletState::new(alpha.clone())?
        }
        None => DirichletState::flat(k)?,
    };

    let mut dropped = Vec::new();
    let mut posteriors: Vec<AnchorPosterior> = Vec::with_capacity(preds.len());
    for p in preds {
        let (mean, epistemic) = aggregate_box(p);
        let epistemic = if cfg.epistemic {
            epistemic
        } else {
            Matrix4::zeros()
        };
        let cov = if cfg.aleatoric {
            match cfg.covariance {
                CovarianceMode::Full => combine_covariance(&epistemic, p.aleatoric_covs()),
                CovarianceMode::Diagonal => {
                    let diag: Vec<Matrix4<f64>> = p
                        .aleatoric_covs()
                        .iter()
                        .map(|c| Matrix4::from_diagonal(&c.diagonal()))
                        .collect();
                    combine_covariance(&epistemic, &diag)
                }
            }
        } else {
            epistemic
        };
        let (_, cov) = cholesky_or_repair(&cov, "per-anchor")?;
        let likelihood = BoxGaussian::new(mean, cov)?;
        let raw_category = aggregate_categorical(p);

        let bbox = gaussian_conjugate_update(&cfg.box_prior, &likelihood)?;
        let corners = bbox.mean();
        if corners[0] >= corners[2] || corners[1] >= corners[3] {
            dropped.push(DroppedAnchor {
                anchor_id: p.anchor_id(),
                reason: "degenerate posterior mean box".to_string(),
            });
            continue;
        }
        let dirichlet = dirichlet_posterior(&dirichlet_prior, &raw_category, &cfg.counts, p.anchor_id())?;
        posteriors.push(AnchorPosterior {
            anchor_id: p.anchor_id(),
            bbox,
            raw_category,
            dirichlet,
        });
    }
    if posteriors.is_empty() {
        return Ok(InferenceOutput {
            detections: Vec::new(),
            dropped,
        });
    }

    let beliefs: Vec<AnchorBelief> = posteriors
        .iter()
        .map(|a| AnchorBelief {
            anchor_id: a.anchor_id,
            bbox: a.bbox.clone(),
            category: dirichlet_mean(&a.dirichlet),
        })
        .collect();
    let clusters = greedy_cluster(&beliefs, cfg.affinity_threshold, cfg.background_index)?;

    let mut detections = Vec::new();
    for cluster in &clusters {
        let center = &posteriors[cluster.center_index];
        let (bbox, dirichlet, member_ids) = match cfg.mode {
            Mode::Nms => (
                center.bbox.clone(),
                center.dirichlet.clone(),
                vec![center.anchor_id],
            ),
            Mode::BayesOd => {
                let rest: Vec<usize> = cluster
                    .member_indices
                    .iter()
                    .copied()
                    .filter(|&i| i != cluster.center_index)
                    .collect();
                let member_boxes: Vec<BoxGaussian> =
                    rest.iter().map(|&i| posteriors[i].bbox.clone()).collect();
                let member_cats: Vec<CategoricalDist> = rest
                    .iter()
                    .map(|&i| posteriors[i].raw_category.clone())
                    .collect();
                let ids: Vec<u64> = rest.iter().map(|&i| posteriors[i].anchor_id).collect();
                let bbox = fuse_gaussians(&center.bbox, &member_boxes)?;
                let dirichlet = fuse_dirichlets(&center.dirichlet, &member_cats, &ids, &cfg.counts)?;
                let mut provenance = vec![center.anchor_id];
                provenance.extend(ids);
                (bbox, dirichlet, provenance)
            }
        };
        let category = dirichlet_mean(&dirichlet);
        let score = foreground_score(&category, cfg.background_index);
        if score < cfg.score_threshold {
            continue;
        }
        if cfg.background_index == Some(category.argmax()) {
            continue;
        }
        let gaussian_entropy = gaussian_entropy(&bbox);
        let categorical_entropy = categorical_entropy(&category);
        detections.push(FinalDetection {
            bbox,
            category,
            dirichlet,
            score,
            gaussian_entropy,
            categorical_entropy,
            member_anchor_ids: member_ids,
        });
    }
    Ok(InferenceOutput {
        detections,
        dropped,
    })
}
