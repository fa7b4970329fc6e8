//! Probability-based detection quality.
//!
//! Pairwise quality is the geometric mean of a spatial term and a label
//! term. The spatial term evaluates, on the integer pixel grid, the
//! probability that each pixel lies inside the detected box (induced by the
//! corner Gaussians), scoring log-loss over the ground-truth extent plus a
//! background penalty outside it. Detections and ground truths are paired
//! by maximum-weight assignment per image; unmatched items count as
//! zero-quality pairs.

use serde::Serialize;
use statrs::function::erf::erfc;

use crate::detection::{BoundingBox, BoxGaussian};
use crate::metrics::assignment::max_weight_assignment;
use crate::metrics::{DetectionInstance, GroundTruthObject};

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// 16-point Gauss-Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 16] = [
    -0.9894009349916499,
    -0.9445750230732326,
    -0.8656312023878318,
    -0.755404408355003,
    -0.6178762444026438,
    -0.45801677765722737,
    -0.2816035507792589,
    -0.09501250983763744,
    0.09501250983763744,
    0.2816035507792589,
    0.45801677765722737,
    0.6178762444026438,
    0.755404408355003,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL_WEIGHTS: [f64; 16] = [
    0.027152459411754095,
    0.06225352393864789,
    0.09515851168249278,
    0.12462897125553387,
    0.14959598881657673,
    0.16915651939500254,
    0.18260341504492358,
    0.1894506104550685,
    0.1894506104550685,
    0.18260341504492358,
    0.16915651939500254,
    0.14959598881657673,
    0.12462897125553387,
    0.09515851168249278,
    0.06225352393864789,
    0.027152459411754095,
];

/// Bivariate standard normal CDF `P(X <= h, Y <= k)` with correlation rho.
///
/// Uses the correlation-path integral with the `r = sin(theta)`
/// substitution, which removes the endpoint singularity:
/// `Phi2 = Phi(h) Phi(k) + (1/2pi) \int_0^{asin(rho)}
///   exp(-(h^2 + k^2 - 2 h k sin t) / (2 cos^2 t)) dt`.
pub fn bivariate_normal_cdf(h: f64, k: f64, rho: f64) -> f64 {
    let rho = rho.clamp(-1.0, 1.0);
    let base = phi(h) * phi(k);
    if rho == 0.0 || h.abs() == f64::INFINITY || k.abs() == f64::INFINITY {
        return base;
    }
    let upper = rho.asin();
    let half = upper / 2.0;
    let mut integral = 0.0;
    for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS) {
        let t = half + half * node;
        let cos2 = t.cos().powi(2);
        integral += weight * (-(h * h + k * k - 2.0 * h * k * t.sin()) / (2.0 * cos2)).exp();
    }
    integral *= half / (2.0 * std::f64::consts::PI);
    (base + integral).clamp(0.0, 1.0)
}

struct CornerMarginal {
    mx: f64,
    my: f64,
    sx: f64,
    sy: f64,
    rho: f64,
}

impl CornerMarginal {
    fn from_block(g: &BoxGaussian, offset: usize) -> Self {
        let cov = g.cov();
        let sx = cov[(offset, offset)].sqrt();
        let sy = cov[(offset + 1, offset + 1)].sqrt();
        let rho = if sx > 0.0 && sy > 0.0 {
            (cov[(offset, offset + 1)] / (sx * sy)).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        Self {
            mx: g.mean()[offset],
            my: g.mean()[offset + 1],
            sx: sx.max(1e-12),
            sy: sy.max(1e-12),
            rho,
        }
    }

    /// P(X <= x, Y <= y).
    fn below(&self, x: f64, y: f64) -> f64 {
        bivariate_normal_cdf((x - self.mx) / self.sx, (y - self.my) / self.sy, self.rho)
    }

    /// P(X >= x, Y >= y).
    fn above(&self, x: f64, y: f64) -> f64 {
        bivariate_normal_cdf((self.mx - x) / self.sx, (self.my - y) / self.sy, self.rho)
    }
}

/// Probability that the pixel center (x, y) lies inside the detected box:
/// the top-left corner is up-left of it and the bottom-right corner is
/// down-right of it.
fn inside_prob(tl: &CornerMarginal, br: &CornerMarginal, x: f64, y: f64) -> f64 {
    tl.below(x, y) * br.above(x, y)
}

/// Pixel index range whose centers fall in [lo, hi), clipped to [0, limit).
fn pixel_range(lo: f64, hi: f64, limit: u32) -> std::ops::Range<i64> {
    let start = (lo - 0.5).ceil().max(0.0) as i64;
    let end = ((hi - 0.5).ceil() as i64).min(i64::from(limit));
    start..end.max(start)
}

/// Spatial quality of a detection against one ground-truth extent.
///
/// `exp((1/|S|) [sum_{S} ln p + sum_{B} ln(1 - p)])` where S is the pixel
/// set of the ground-truth box and B the pixels outside it within the
/// detection's 3-sigma evaluation window. A pixel with zero foreground
/// probability inside S (or probability one in B) annihilates the quality.
pub fn spatial_quality(det: &BoxGaussian, gt: &BoundingBox, image: (u32, u32)) -> f64 {
    let (width, height) = image;
    let tl = CornerMarginal::from_block(det, 0);
    let br = CornerMarginal::from_block(det, 2);

    let gt_x = pixel_range(gt.x1(), gt.x2(), width);
    let gt_y = pixel_range(gt.y1(), gt.y2(), height);
    let seg_count = (gt_x.end - gt_x.start).max(0) * (gt_y.end - gt_y.start).max(0);
    if seg_count == 0 {
        return 0.0;
    }

    let mut log_loss = 0.0f64;
    for u in gt_x.clone() {
        for v in gt_y.clone() {
            let p = inside_prob(&tl, &br, u as f64 + 0.5, v as f64 + 0.5);
            log_loss += p.ln();
            if log_loss == f64::NEG_INFINITY {
                return 0.0;
            }
        }
    }

    // background window: detection mean box dilated by 3 sigma per corner
    let reach = 3.0 * tl.sx.max(tl.sy).max(br.sx).max(br.sy);
    let m = det.mean();
    let win_x = pixel_range(m[0].min(m[2]) - reach, m[0].max(m[2]) + reach, width);
    let win_y = pixel_range(m[1].min(m[3]) - reach, m[1].max(m[3]) + reach, height);
    for u in win_x {
        for v in win_y.clone() {
            if gt_x.contains(&u) && gt_y.contains(&v) {
                continue;
            }
            let p = inside_prob(&tl, &br, u as f64 + 0.5, v as f64 + 0.5);
            log_loss += (1.0 - p).ln();
            if log_loss == f64::NEG_INFINITY {
                return 0.0;
            }
        }
    }
    (log_loss / seg_count as f64).exp()
}

/// Pairwise quality: geometric mean of spatial and label quality.
pub fn pairwise_quality(
    det: &DetectionInstance,
    gt: &GroundTruthObject,
    image: (u32, u32),
) -> f64 {
    let label = det
        .detection
        .category
        .probs()
        .get(gt.category_index)
        .copied()
        .unwrap_or(0.0);
    if label == 0.0 {
        return 0.0;
    }
    let spatial = spatial_quality(&det.detection.bbox, &gt.bbox, image);
    (spatial * label).sqrt()
}

/// PDQ over a dataset, with its components.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PdqReport {
    /// Overall score in [0, 100].
    pub pdq: f64,
    /// Mean spatial quality over matched pairs.
    pub avg_spatial_quality: f64,
    /// Mean label quality over matched pairs.
    pub avg_label_quality: f64,
    pub matched_pairs: usize,
    pub unmatched_detections: usize,
    pub unmatched_ground_truths: usize,
}

/// Computes PDQ: per image, detections and ground truths are paired by
/// maximum-weight assignment on pairwise quality; pairs with zero quality
/// count their detection and ground truth as unmatched. The final score
/// averages pair qualities over matched pairs plus unmatched items.
pub fn pdq_score(
    dets: &[DetectionInstance],
    gts: &[GroundTruthObject],
    image_size: (u32, u32),
) -> PdqReport {
    let mut image_ids: Vec<u64> = dets
        .iter()
        .map(|d| d.image_id)
        .chain(gts.iter().map(|g| g.image_id))
        .collect();
    image_ids.sort_unstable();
    image_ids.dedup();

    let mut total_quality = 0.0f64;
    let mut spatial_sum = 0.0f64;
    let mut label_sum = 0.0f64;
    let mut matched = 0usize;
    let mut unmatched_dets = 0usize;
    let mut unmatched_gts = 0usize;

    for image_id in image_ids {
        let img_dets: Vec<&DetectionInstance> =
            dets.iter().filter(|d| d.image_id == image_id).collect();
        let img_gts: Vec<&GroundTruthObject> =
            gts.iter().filter(|g| g.image_id == image_id).collect();
        if img_dets.is_empty() || img_gts.is_empty() {
            unmatched_dets += img_dets.len();
            unmatched_gts += img_gts.len();
            continue;
        }
        let weights: Vec<Vec<f64>> = img_dets
            .iter()
            .map(|d| {
                img_gts
                    .iter()
                    .map(|g| pairwise_quality(d, g, image_size))
                    .collect()
            })
            .collect();
        let assignment = max_weight_assignment(&weights);
        let mut gt_used = vec![false; img_gts.len()];
        for (row, col) in assignment.iter().enumerate() {
            match col {
                Some(c) if weights[row][*c] > 0.0 => {
                    let q = weights[row][*c];
                    total_quality += q;
                    matched += 1;
                    gt_used[*c] = true;
                    let label = img_dets[row].detection.category.probs()
                        [img_gts[*c].category_index];
                    spatial_sum += if label > 0.0 { q * q / label } else { 0.0 };
                    label_sum += label;
                }
                _ => unmatched_dets += 1,
            }
        }
        unmatched_gts += gt_used.iter().filter(|u| !**u).count();
    }

    let denom = matched + unmatched_dets + unmatched_gts;
    PdqReport {
        pdq: if denom == 0 {
            0.0
        } else {
            100.0 * total_quality / denom as f64
        },
        avg_spatial_quality: if matched == 0 {
            0.0
        } else {
            spatial_sum / matched as f64
        },
        avg_label_quality: if matched == 0 {
            0.0
        } else {
            label_sum / matched as f64
        },
        matched_pairs: matched,
        unmatched_detections: unmatched_dets,
        unmatched_ground_truths: unmatched_gts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{CategoricalDist, BoxGaussian};
    use crate::fusion::FinalDetection;
    use crate::priors::DirichletState;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Vector4};

    fn detection(image_id: u64, corners: [f64; 4], var: f64, probs: Vec<f64>) -> DetectionInstance {
        let bbox = BoxGaussian::new(Vector4::from(corners), Matrix4::identity() * var).unwrap();
        let category = CategoricalDist::new(probs).unwrap();
        let score = category.probs().iter().copied().fold(0.0, f64::max);
        DetectionInstance {
            image_id,
            detection: FinalDetection {
                gaussian_entropy: crate::detection::gaussian_entropy(&bbox),
                categorical_entropy: crate::detection::categorical_entropy(&category),
                dirichlet: DirichletState::flat(category.len()).unwrap(),
                bbox,
                category,
                score,
                member_anchor_ids: vec![0],
            },
        }
    }

    fn gt(image_id: u64, corners: [f64; 4], category: usize) -> GroundTruthObject {
        GroundTruthObject {
            image_id,
            bbox: BoundingBox::new(corners[0], corners[1], corners[2], corners[3]).unwrap(),
            category_index: category,
        }
    }

    #[test]
    fn bivariate_cdf_zero_correlation_is_product() {
        for (h, k) in [(0.0, 0.0), (1.0, -0.5), (2.3, 1.7), (-3.0, 0.2)] {
            assert_relative_eq!(
                bivariate_normal_cdf(h, k, 0.0),
                phi(h) * phi(k),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn bivariate_cdf_closed_form_at_origin() {
        // Phi2(0, 0, rho) = 1/4 + asin(rho) / (2 pi)
        for rho in [-0.9f64, -0.5, -0.1, 0.0, 0.3, 0.7, 0.95] {
            let expect = 0.25 + rho.asin() / (2.0 * std::f64::consts::PI);
            assert_relative_eq!(bivariate_normal_cdf(0.0, 0.0, rho), expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn bivariate_cdf_symmetry_and_bounds() {
        for &(h, k, rho) in &[(1.0, 0.5, 0.4), (-0.7, 1.3, -0.6), (0.2, 0.2, 0.9)] {
            let a = bivariate_normal_cdf(h, k, rho);
            let b = bivariate_normal_cdf(k, h, rho);
            assert_relative_eq!(a, b, epsilon = 1e-12);
            assert!((0.0..=1.0).contains(&a));
            // marginal consistency: Phi2 <= min(Phi(h), Phi(k))
            assert!(a <= phi(h).min(phi(k)) + 1e-12);
        }
    }

    #[test]
    fn perfect_detection_scores_one() {
        let det = detection(0, [10.0, 10.0, 60.0, 50.0], 1e-6, vec![1.0, 0.0]);
        let g = gt(0, [10.0, 10.0, 60.0, 50.0], 0);
        let q = pairwise_quality(&det, &g, (100, 80));
        assert!((q - 1.0).abs() < 5e-3, "quality {q}");
        let report = pdq_score(&[det], &[g], (100, 80));
        assert!((report.pdq - 100.0).abs() < 0.5, "pdq {}", report.pdq);
    }

    #[test]
    fn no_detections_scores_zero() {
        let g = gt(0, [10.0, 10.0, 60.0, 50.0], 0);
        let report = pdq_score(&[], &[g], (100, 80));
        assert_eq!(report.pdq, 0.0);
        assert_eq!(report.unmatched_ground_truths, 1);
    }

    #[test]
    fn label_probability_enters_as_square_root() {
        let det = detection(0, [10.0, 10.0, 60.0, 50.0], 1e-6, vec![0.25, 0.75]);
        let g = gt(0, [10.0, 10.0, 60.0, 50.0], 0);
        let q = pairwise_quality(&det, &g, (100, 80));
        assert!((q - 0.5).abs() < 5e-3, "quality {q}");
    }

    #[test]
    fn zero_label_probability_annihilates() {
        let det = detection(0, [10.0, 10.0, 60.0, 50.0], 1e-6, vec![0.0, 1.0]);
        let g = gt(0, [10.0, 10.0, 60.0, 50.0], 0);
        assert_eq!(pairwise_quality(&det, &g, (100, 80)), 0.0);
    }

    #[test]
    fn quality_bounded_by_label_quality() {
        let det = detection(0, [10.0, 10.0, 40.0, 40.0], 4.0, vec![0.6, 0.4]);
        let g = gt(0, [12.0, 10.0, 42.0, 40.0], 0);
        let q = pairwise_quality(&det, &g, (100, 80));
        assert!(q <= 0.6f64.max(1.0));
        assert!(q <= 1.0);
        assert!(q > 0.0);
    }

    #[test]
    fn off_target_detection_counts_as_unmatched() {
        let far = detection(0, [70.0, 60.0, 90.0, 75.0], 1e-6, vec![1.0, 0.0]);
        let g = gt(0, [5.0, 5.0, 25.0, 20.0], 0);
        let report = pdq_score(&[far], &[g], (100, 80));
        assert_eq!(report.matched_pairs, 0);
        assert_eq!(report.unmatched_detections, 1);
        assert_eq!(report.unmatched_ground_truths, 1);
        assert_eq!(report.pdq, 0.0);
    }
}
