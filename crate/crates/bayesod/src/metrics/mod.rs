//! Detection-quality and uncertainty-quality metrics: mAP at 0.5 IoU,
//! Gaussian/categorical minimum uncertainty error, and PDQ.

mod assignment;
mod pdq;

pub use pdq::{bivariate_normal_cdf, pairwise_quality, pdq_score, spatial_quality, PdqReport};

use serde::Serialize;

use crate::detection::{iou, BoundingBox, CategoryTable};
use crate::error::{Error, Result};
use crate::fusion::FinalDetection;

/// A detection tied to its image.
#[derive(Debug, Clone)]
pub struct DetectionInstance {
    pub image_id: u64,
    pub detection: FinalDetection,
}

/// Ground-truth object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    pub image_id: u64,
    pub bbox: BoundingBox,
    pub category_index: usize,
}

/// Outcome of greedy matching for one detection.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    /// Index into the detection list passed to [`match_detections`].
    pub det_index: usize,
    /// Matched ground-truth index, when the detection is a true positive.
    pub matched_gt: Option<usize>,
    /// IoU with the matched ground truth (0 for false positives).
    pub iou_at_match: f64,
}

impl MatchRecord {
    pub fn matched(&self) -> bool {
        self.matched_gt.is_some()
    }
}

fn detection_category(d: &FinalDetection) -> usize {
    d.category.argmax()
}

/// Total order on detections used for deterministic, input-order-independent
/// score ranking: score descending, then image id, box mean, provenance.
fn ranking_order(a: &DetectionInstance, b: &DetectionInstance) -> std::cmp::Ordering {
    b.detection
        .score
        .partial_cmp(&a.detection.score)
        .unwrap()
        .then(a.image_id.cmp(&b.image_id))
        .then_with(|| {
            let ma = a.detection.bbox.mean();
            let mb = b.detection.bbox.mean();
            for i in 0..4 {
                match ma[i].partial_cmp(&mb[i]).unwrap() {
                    std::cmp::Ordering::Equal => continue,
                    other => return other,
                }
            }
            a.detection
                .member_anchor_ids
                .cmp(&b.detection.member_anchor_ids)
        })
}

/// Greedy score-ordered matching at an IoU threshold, one detection per
/// ground truth, per category and per image.
pub fn match_detections(
    dets: &[DetectionInstance],
    gts: &[GroundTruthObject],
    iou_thresh: f64,
) -> Result<Vec<MatchRecord>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::invalid("IoU threshold must lie in (0, 1)"));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| ranking_order(&dets[a], &dets[b]));

    let mut gt_taken = vec![false; gts.len()];
    let mut records: Vec<MatchRecord> = (0..dets.len())
        .map(|det_index| MatchRecord {
            det_index,
            matched_gt: None,
            iou_at_match: 0.0,
        })
        .collect();
    for det_index in order {
        let det = &dets[det_index];
        let category = detection_category(&det.detection);
        let det_box = match BoundingBox::from_corners(det.detection.bbox.mean()) {
            Ok(b) => b,
            Err(_) => continue, // degenerate stored box: stays a false positive
        };
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] || gt.image_id != det.image_id || gt.category_index != category {
                continue;
            }
            let overlap = iou(&det_box, &gt.bbox);
            if overlap >= iou_thresh && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        if let Some((gi, overlap)) = best {
            gt_taken[gi] = true;
            records[det_index].matched_gt = Some(gi);
            records[det_index].iou_at_match = overlap;
        }
    }
    Ok(records)
}

/// Average precision (percent) from score-ranked (score, is_tp) pairs using
/// all-point interpolation of the precision/recall curve.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> f64 {
    assert!(num_gt > 0, "AP needs at least one ground truth");
    if scored.is_empty() {
        return 0.0;
    }
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &(_, is_tp) in &ranked {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // precision envelope from the right
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..precision.len() {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    100.0 * ap
}

/// Minimum uncertainty error over entropy thresholds.
///
/// `UE(d) = 0.5 * frac(TP entropy > d) + 0.5 * frac(FP entropy <= d)`,
/// minimized over the observed entropy values plus the two infinities.
/// Returns the minimum as a percentage with its threshold, or `None` when
/// either side is empty (the metric is undefined for the category).
pub fn minimum_uncertainty_error(
    entropies_tp: &[f64],
    entropies_fp: &[f64],
) -> Option<(f64, f64)> {
    if entropies_tp.is_empty() || entropies_fp.is_empty() {
        return None;
    }
    let mut tp = entropies_tp.to_vec();
    let mut fp = entropies_fp.to_vec();
    tp.sort_by(|a, b| a.partial_cmp(b).unwrap());
    fp.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend_from_slice(&tp);
    candidates.extend_from_slice(&fp);
    candidates.push(f64::INFINITY);
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    for &delta in &candidates {
        let tp_above = tp.len() - tp.partition_point(|&e| e <= delta);
        let fp_below = fp.partition_point(|&e| e <= delta);
        let ue = 0.5 * tp_above as f64 / tp.len() as f64 + 0.5 * fp_below as f64 / fp.len() as f64;
        if ue < best.0 {
            best = (ue, delta);
        }
    }
    Some((100.0 * best.0, best.1))
}

/// Which metric families to compute.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub map: bool,
    pub mue: bool,
    pub pdq: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            map: true,
            mue: true,
            pdq: true,
        }
    }
}

/// Per-category results; absent values mean the metric was not requested or
/// is undefined for the category.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CategoryMetrics {
    pub index: usize,
    pub name: String,
    pub ground_truths: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gmue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gmue_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cmue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cmue_threshold: Option<f64>,
}

/// Full evaluation report; aggregates are means over the per-category
/// values present.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub categories: Vec<CategoryMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mgmue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcmue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pdq: Option<PdqReport>,
    pub notices: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Runs the requested metrics over a detection/ground-truth corpus.
///
/// `image_size` is required when PDQ is requested. Results are
/// deterministic and independent of input record order.
pub fn evaluate(
    dets: &[DetectionInstance],
    gts: &[GroundTruthObject],
    categories: &CategoryTable,
    image_size: Option<(u32, u32)>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let k = categories.len();
    for g in gts {
        if g.category_index >= k {
            return Err(Error::invalid(format!(
                "ground-truth category {} out of range for {k} categories",
                g.category_index
            )));
        }
    }
    for d in dets {
        if d.detection.category.len() != k {
            return Err(Error::invalid(
                "detection category count does not match the table",
            ));
        }
    }
    let records = match_detections(dets, gts, opts.iou_threshold)?;

    let mut notices = Vec::new();
    let mut per_category = Vec::with_capacity(k);
    for index in 0..k {
        let name = categories.names()[index].clone();
        let ground_truths = gts.iter().filter(|g| g.category_index == index).count();
        let cat_records: Vec<&MatchRecord> = records
            .iter()
            .filter(|r| detection_category(&dets[r.det_index].detection) == index)
            .collect();
        let true_positives = cat_records.iter().filter(|r| r.matched()).count();
        let false_positives = cat_records.len() - true_positives;

        let ap = if opts.map && ground_truths > 0 {
            let scored: Vec<(f64, bool)> = cat_records
                .iter()
                .map(|r| (dets[r.det_index].detection.score, r.matched()))
                .collect();
            Some(average_precision(&scored, ground_truths))
        } else {
            if opts.map && ground_truths == 0 && !cat_records.is_empty() {
                notices.push(format!(
                    "category {index} ({name}) has detections but no ground truth; excluded from mAP"
                ));
            }
            None
        };

        let (mut gmue, mut gmue_threshold, mut cmue, mut cmue_threshold) = (None, None, None, None);
        if opts.mue {
            if ground_truths == 0 {
                if !cat_records.is_empty() {
                    notices.push(format!(
                        "category {index} ({name}) has no ground truth anywhere; excluded from MUE"
                    ));
                }
            } else {
                let tp_g: Vec<f64> = cat_records
                    .iter()
                    .filter(|r| r.matched())
                    .map(|r| dets[r.det_index].detection.gaussian_entropy)
                    .collect();
                let fp_g: Vec<f64> = cat_records
                    .iter()
                    .filter(|r| !r.matched())
                    .map(|r| dets[r.det_index].detection.gaussian_entropy)
                    .collect();
                match minimum_uncertainty_error(&tp_g, &fp_g) {
                    Some((m, t)) => {
                        gmue = Some(m);
                        gmue_threshold = Some(t);
                    }
                    None => notices.push(format!(
                        "category {index} ({name}) lacks a TP or FP; MUE undefined"
                    )),
                }
                let tp_c: Vec<f64> = cat_records
                    .iter()
                    .filter(|r| r.matched())
                    .map(|r| dets[r.det_index].detection.categorical_entropy)
                    .collect();
                let fp_c: Vec<f64> = cat_records
                    .iter()
                    .filter(|r| !r.matched())
                    .map(|r| dets[r.det_index].detection.categorical_entropy)
                    .collect();
                if let Some((m, t)) = minimum_uncertainty_error(&tp_c, &fp_c) {
                    cmue = Some(m);
                    cmue_threshold = Some(t);
                }
            }
        }
        per_category.push(CategoryMetrics {
            index,
            name,
            ground_truths,
            true_positives,
            false_positives,
            ap,
            gmue,
            gmue_threshold,
            cmue,
            cmue_threshold,
        });
    }

    let map = mean(per_category.iter().filter_map(|c| c.ap));
    let mgmue = mean(per_category.iter().filter_map(|c| c.gmue));
    let mcmue = mean(per_category.iter().filter_map(|c| c.cmue));
    let pdq = if opts.pdq {
        let size = image_size
            .ok_or_else(|| Error::invalid("PDQ requires the image size"))?;
        Some(pdq_score(dets, gts, size))
    } else {
        None
    };
    Ok(EvalReport {
        categories: per_category,
        map,
        mgmue,
        mcmue,
        pdq,
        notices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{BoxGaussian, CategoricalDist};
    use crate::priors::DirichletState;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Vector4};
    use proptest::prelude::*;
    use rand::Rng;

    fn det(image_id: u64, corners: [f64; 4], probs: Vec<f64>, score_hint: f64) -> DetectionInstance {
        let bbox = BoxGaussian::new(Vector4::from(corners), Matrix4::identity()).unwrap();
        let category = CategoricalDist::new(probs).unwrap();
        DetectionInstance {
            image_id,
            detection: FinalDetection {
                gaussian_entropy: crate::detection::gaussian_entropy(&bbox),
                categorical_entropy: crate::detection::categorical_entropy(&category),
                dirichlet: DirichletState::flat(category.len()).unwrap(),
                bbox,
                category,
                score: score_hint,
                member_anchor_ids: vec![image_id],
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
    fn exact_match() {
        let d = det(0, [0.0, 0.0, 10.0, 10.0], vec![0.9, 0.1], 0.9);
        let g = gt(0, [0.0, 0.0, 10.0, 10.0], 0);
        let records = match_detections(&[d], &[g], 0.5).unwrap();
        assert!(records[0].matched());
        assert_eq!(records[0].iou_at_match, 1.0);
    }

    #[test]
    fn duplicate_suppressed_in_matching() {
        let d1 = det(0, [0.0, 0.0, 10.0, 10.0], vec![0.9, 0.1], 0.9);
        let d2 = det(0, [0.5, 0.0, 10.5, 10.0], vec![0.8, 0.2], 0.8);
        let g = gt(0, [0.0, 0.0, 10.0, 10.0], 0);
        let records = match_detections(&[d1, d2], &[g], 0.5).unwrap();
        assert!(records[0].matched());
        assert!(!records[1].matched());
    }

    #[test]
    fn crafted_scene_matches_greedy_replay_oracle() {
        // 4 detections, 3 ground truths, same category
        let dets = vec![
            det(0, [0.0, 0.0, 10.0, 10.0], vec![0.95, 0.05], 0.95),
            det(0, [0.8, 0.0, 10.8, 10.0], vec![0.90, 0.10], 0.90),
            det(0, [20.0, 0.0, 30.0, 10.0], vec![0.85, 0.15], 0.85),
            det(0, [41.0, 0.0, 50.0, 10.0], vec![0.80, 0.20], 0.80),
        ];
        let gts = vec![
            gt(0, [0.0, 0.0, 10.0, 10.0], 0),
            gt(0, [20.5, 0.0, 30.5, 10.0], 0),
            gt(0, [40.0, 0.0, 50.0, 10.0], 0),
        ];
        let records = match_detections(&dets, &gts, 0.5).unwrap();

        // naive replay: walk detections by descending score, scan all
        // unused ground truths for the best IoU above threshold
        let mut used = [false; 3];
        let mut expect: Vec<Option<usize>> = vec![None; 4];
        for di in 0..4 {
            let dbox = BoundingBox::from_corners(dets[di].detection.bbox.mean()).unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (gix, g) in gts.iter().enumerate() {
                if used[gix] {
                    continue;
                }
                let v = iou(&dbox, &g.bbox);
                if v >= 0.5 && best.map_or(true, |(_, b)| v > b) {
                    best = Some((gix, v));
                }
            }
            if let Some((gix, _)) = best {
                used[gix] = true;
                expect[di] = Some(gix);
            }
        }
        for di in 0..4 {
            assert_eq!(records[di].matched_gt, expect[di], "detection {di}");
        }
    }

    #[test]
    fn ap_perfect_and_empty() {
        assert_eq!(average_precision(&[(0.9, true)], 1), 100.0);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn ap_hand_computed_case() {
        // ranked (TP, FP, TP) over 2 ground truths:
        // all-point interpolation gives 0.5 * 1 + 0.5 * (2/3) = 83.33%
        let scored = vec![(0.9, true), (0.8, false), (0.7, true)];
        assert_relative_eq!(average_precision(&scored, 2), 100.0 * 5.0 / 6.0, epsilon = 1e-9);
    }

    #[test]
    fn ap_depends_only_on_ranks() {
        let scored = vec![(0.9, true), (0.5, false), (0.4, true), (0.1, false)];
        let squashed: Vec<(f64, bool)> = scored
            .iter()
            .map(|&(s, t)| (s * s * 0.3 + 0.01, t)) // strictly monotone rescale
            .collect();
        assert_eq!(average_precision(&scored, 3), average_precision(&squashed, 3));
    }

    #[test]
    fn mue_perfect_separation() {
        let (mue, threshold) = minimum_uncertainty_error(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(mue, 0.0);
        assert!((2.0..3.0).contains(&threshold));
    }

    #[test]
    fn mue_interleaved() {
        let (mue, _) = minimum_uncertainty_error(&[1.0, 3.0], &[2.0, 4.0]).unwrap();
        assert_relative_eq!(mue, 25.0, epsilon = 1e-12);
    }

    #[test]
    fn mue_identical_distributions() {
        let (mue, _) = minimum_uncertainty_error(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_relative_eq!(mue, 50.0, epsilon = 1e-12);
    }

    #[test]
    fn mue_undefined_when_one_side_empty() {
        assert!(minimum_uncertainty_error(&[], &[1.0]).is_none());
        assert!(minimum_uncertainty_error(&[1.0], &[]).is_none());
    }

    fn naive_mue_sweep(tp: &[f64], fp: &[f64]) -> f64 {
        let mut candidates: Vec<f64> = tp.iter().chain(fp).copied().collect();
        candidates.push(f64::NEG_INFINITY);
        candidates.push(f64::INFINITY);
        let mut best = f64::INFINITY;
        for &delta in &candidates {
            let a = tp.iter().filter(|&&e| e > delta).count() as f64 / tp.len() as f64;
            let b = fp.iter().filter(|&&e| e <= delta).count() as f64 / fp.len() as f64;
            best = best.min(0.5 * a + 0.5 * b);
        }
        100.0 * best
    }

    proptest! {
        #[test]
        fn mue_equals_exhaustive_sweep(seed in 0u64..500) {
            let mut rng = crate::stream::derive_rng(seed, &[41]);
            let ntp = rng.random_range(1usize..20);
            let nfp = rng.random_range(1usize..20);
            let tp: Vec<f64> = (0..ntp).map(|_| rng.random_range(0.0..6.0)).collect();
            let fp: Vec<f64> = (0..nfp).map(|_| rng.random_range(0.0..6.0)).collect();
            let (mue, _) = minimum_uncertainty_error(&tp, &fp).unwrap();
            prop_assert_eq!(mue, naive_mue_sweep(&tp, &fp));
            prop_assert!((0.0..=50.0).contains(&mue));
        }
    }

    #[test]
    fn evaluate_aggregates_are_category_means() {
        let table = CategoryTable::new(vec!["a".into(), "b".into()], None).unwrap();
        let dets = vec![
            det(0, [0.0, 0.0, 10.0, 10.0], vec![0.9, 0.1], 0.9),
            det(0, [30.0, 0.0, 40.0, 10.0], vec![0.8, 0.2], 0.8),
            det(1, [0.0, 0.0, 10.0, 10.0], vec![0.2, 0.8], 0.8),
            det(1, [30.0, 0.0, 40.0, 10.0], vec![0.3, 0.7], 0.7),
        ];
        let gts = vec![
            gt(0, [0.0, 0.0, 10.0, 10.0], 0),
            gt(1, [0.0, 0.0, 10.0, 10.0], 1),
        ];
        let report = evaluate(&dets, &gts, &table, Some((64, 48)), &EvalOptions::default()).unwrap();
        let aps: Vec<f64> = report.categories.iter().filter_map(|c| c.ap).collect();
        assert_eq!(aps.len(), 2);
        assert_relative_eq!(
            report.map.unwrap(),
            aps.iter().sum::<f64>() / 2.0,
            epsilon = 1e-12
        );
        let gmues: Vec<f64> = report.categories.iter().filter_map(|c| c.gmue).collect();
        assert_relative_eq!(
            report.mgmue.unwrap(),
            gmues.iter().sum::<f64>() / gmues.len() as f64,
            epsilon = 1e-12
        );
    }

    #[test]
    fn evaluate_is_input_order_independent() {
        let table = CategoryTable::new(vec!["a".into(), "b".into()], None).unwrap();
        let mut dets = vec![
            det(0, [0.0, 0.0, 10.0, 10.0], vec![0.9, 0.1], 0.9),
            det(0, [20.0, 0.0, 30.0, 10.0], vec![0.7, 0.3], 0.7),
            det(0, [0.5, 0.0, 10.5, 10.0], vec![0.6, 0.4], 0.6),
            det(1, [5.0, 5.0, 15.0, 15.0], vec![0.1, 0.9], 0.9),
        ];
        let gts = vec![
            gt(0, [0.0, 0.0, 10.0, 10.0], 0),
            gt(1, [5.0, 5.0, 15.0, 15.0], 1),
        ];
        let a = evaluate(&dets, &gts, &table, Some((64, 48)), &EvalOptions::default()).unwrap();
        dets.reverse();
        let b = evaluate(&dets, &gts, &table, Some((64, 48)), &EvalOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn category_without_ground_truth_is_noticed() {
        let table = CategoryTable::new(vec!["a".into(), "b".into()], None).unwrap();
        let dets = vec![det(0, [0.0, 0.0, 10.0, 10.0], vec![0.2, 0.8], 0.8)];
        let gts = vec![gt(0, [50.0, 50.0, 60.0, 60.0], 0)];
        let report = evaluate(&dets, &gts, &table, None, &EvalOptions { pdq: false, ..Default::default() }).unwrap();
        assert!(report.categories[1].gmue.is_none());
        assert!(report
            .notices
            .iter()
            .any(|n| n.contains("no ground truth anywhere")));
    }

    #[test]
    fn pdq_requires_image_size() {
        let table = CategoryTable::new(vec!["a".into(), "b".into()], None).unwrap();
        let err = evaluate(&[], &[], &table, None, &EvalOptions::default());
        assert!(err.is_err());
    }
}
