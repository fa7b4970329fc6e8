//! Seeded generator of ground-truth scenes and simulated per-anchor
//! stochastic detector outputs (standing in for a trained detector), so the
//! full inference chain can be exercised end to end at desk scale.
//!
//! No pixels are generated: a scene is a set of ground-truth boxes plus
//! anchor predictions. Object anchors repeat the ground-truth box corrupted
//! per run with correlated Gaussian corner noise; background anchors sit on
//! random boxes away from every object and carry flatter logits. RNG
//! streams derive from (seed, image id, anchor id), so generation is
//! order-free and reproducible.

use nalgebra::{Cholesky, Matrix4, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use std::ops::RangeInclusive;

use crate::detection::{BoundingBox, CategoryTable};
use crate::error::{Error, Result};
use crate::mc::AnchorPrediction;
use crate::metrics::GroundTruthObject;
use crate::stream::{derive_rng, STREAM_ANCHOR, STREAM_LAYOUT};

/// Floor added to reported aleatoric covariances so they stay positive
/// definite even with zero configured noise.
const ALEATORIC_FLOOR: f64 = 1e-6;
/// Per-entry logit noise across stochastic runs.
const LOGIT_NOISE_STD: f64 = 0.5;
/// Background anchors use this fraction of the configured logit sharpness.
const BACKGROUND_SHARPNESS_FACTOR: f64 = 0.25;
/// Background boxes are re-drawn until their IoU with every object stays
/// below this cap.
const BACKGROUND_IOU_CAP: f64 = 0.1;
const BACKGROUND_PLACEMENT_TRIES: usize = 50;

/// How the reported aleatoric covariance relates to the true noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AleatoricModel {
    /// Reported covariance equals the true noise covariance.
    Faithful,
    /// Reported covariance understates the true noise.
    Overconfident,
    /// Reported covariance overstates the true noise.
    Underconfident,
}

impl AleatoricModel {
    pub fn report_scale(self) -> f64 {
        match self {
            AleatoricModel::Faithful => 1.0,
            AleatoricModel::Overconfident => 0.25,
            AleatoricModel::Underconfident => 4.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "faithful" => Ok(Self::Faithful),
            "overconfident" => Ok(Self::Overconfident),
            "underconfident" => Ok(Self::Underconfident),
            other => Err(Error::invalid(format!("unknown aleatoric model {other:?}"))),
        }
    }
}

/// Generator configuration.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub image_width: u32,
    pub image_height: u32,
    pub num_images: u32,
    pub categories: CategoryTable,
    pub objects_per_image: RangeInclusive<u32>,
    /// Box side length range in pixels (applies to width and height).
    pub box_size: RangeInclusive<f64>,
    pub anchors_per_object: RangeInclusive<u32>,
    /// Expected background anchors per image (Poisson rate).
    pub false_anchor_rate: f64,
    /// Per-corner-coordinate noise standard deviation in pixels.
    pub noise_std: f64,
    /// Correlation between the same axis of the two corners (x1 with x2,
    /// y1 with y2), so the true noise covariance has off-diagonal mass.
    pub corner_correlation: f64,
    pub aleatoric_model: AleatoricModel,
    /// Peak logit value assigned to an object anchor's true category.
    pub logit_sharpness: f64,
    /// Stochastic runs per anchor.
    pub mc_runs: u32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_width: 640,
            image_height: 480,
            num_images: 10,
            categories: CategoryTable::new(
                vec!["car".into(), "pedestrian".into(), "cyclist".into()],
                None,
            )
            .expect("static table is valid"),
            objects_per_image: 1..=4,
            box_size: 40.0..=120.0,
            anchors_per_object: 3..=8,
            false_anchor_rate: 3.0,
            noise_std: 2.0,
            corner_correlation: 0.3,
            aleatoric_model: AleatoricModel::Faithful,
            logit_sharpness: 4.0,
            mc_runs: 5,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if self.objects_per_image.is_empty() || self.anchors_per_object.is_empty() {
            return Err(Error::invalid("count ranges must be ordered"));
        }
        if *self.anchors_per_object.start() == 0 {
            return Err(Error::invalid("each object needs at least one anchor"));
        }
        if self.box_size.is_empty() || *self.box_size.start() <= 0.0 {
            return Err(Error::invalid("box size range must be positive and ordered"));
        }
        let limit = f64::from(self.image_width.min(self.image_height));
        if *self.box_size.end() > limit {
            return Err(Error::invalid(format!(
                "box size {} exceeds the image ({limit} px)",
                self.box_size.end()
            )));
        }
        if self.false_anchor_rate < 0.0 || !self.false_anchor_rate.is_finite() {
            return Err(Error::invalid("false anchor rate must be non-negative"));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::invalid("noise std must be non-negative"));
        }
        if !(-1.0 < self.corner_correlation && self.corner_correlation < 1.0) {
            return Err(Error::invalid("corner correlation must lie in (-1, 1)"));
        }
        if self.logit_sharpness < 0.0 || !self.logit_sharpness.is_finite() {
            return Err(Error::invalid("logit sharpness must be non-negative"));
        }
        if self.mc_runs == 0 {
            return Err(Error::invalid("need at least one stochastic run"));
        }
        Ok(())
    }

    /// Parses a flat `key = value` config (one pair per line, `#` comments),
    /// starting from the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, "expected key = value"))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::parse(line_no, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("invalid value {value:?} for {key}")))
        }
        fn range_u32(key: &str, value: &str) -> Result<RangeInclusive<u32>> {
            let (a, b) = value
                .split_once("..")
                .ok_or_else(|| Error::invalid(format!("{key} expects min..max")))?;
            Ok(num::<u32>(key, a.trim())?..=num::<u32>(key, b.trim())?)
        }
        match key {
            "image_width" => self.image_width = num(key, value)?,
            "image_height" => self.image_height = num(key, value)?,
            "num_images" => self.num_images = num(key, value)?,
            "categories" => {
                let names: Vec<String> = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                // a fresh category list resets any background designation
                self.categories = CategoryTable::new(names, None)?;
            }
            "background_index" => {
                let background = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(num::<usize>(key, value)?)
                };
                self.categories =
                    CategoryTable::new(self.categories.names().to_vec(), background)?;
            }
            "objects_per_image" => self.objects_per_image = range_u32(key, value)?,
            "anchors_per_object" => self.anchors_per_object = range_u32(key, value)?,
            "box_size" => {
                let (a, b) = value
                    .split_once("..")
                    .ok_or_else(|| Error::invalid("box_size expects min..max"))?;
                self.box_size = num::<f64>(key, a.trim())?..=num::<f64>(key, b.trim())?;
            }
            "false_anchor_rate" => self.false_anchor_rate = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "corner_correlation" => self.corner_correlation = num(key, value)?,
            "aleatoric_model" => self.aleatoric_model = AleatoricModel::parse(value)?,
            "logit_sharpness" => self.logit_sharpness = num(key, value)?,
            "mc_runs" => self.mc_runs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

/// True corner-noise covariance implied by a config: per-coordinate
/// variance `std^2` with correlation `rho` between x1/x2 and y1/y2.
pub fn noise_covariance(noise_std: f64, corner_correlation: f64) -> Matrix4<f64> {
    let v = noise_std * noise_std;
    let c = corner_correlation * v;
    let mut m = Matrix4::identity() * v;
    m[(0, 2)] = c;
    m[(2, 0)] = c;
    m[(1, 3)] = c;
    m[(3, 1)] = c;
    m
}

/// Whether an anchor simulates an object or background clutter. Hidden from
/// the inference pipeline; used by tests and directional analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorSource {
    Object { gt_index: usize },
    Background,
}

/// One generated image: ground truth, predictions, and per-anchor
/// provenance (parallel to `predictions`).
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image_id: u64,
    pub ground_truth: Vec<GroundTruthObject>,
    pub predictions: Vec<AnchorPrediction>,
    pub provenance: Vec<AnchorSource>,
}

struct NoiseModel {
    chol: Option<Matrix4<f64>>,
    reported: Matrix4<f64>,
}

fn sample_noise(rng: &mut impl Rng, chol: &Option<Matrix4<f64>>) -> Vector4<f64> {
    match chol {
        None => Vector4::zeros(),
        Some(l) => {
            let z = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
            l * z
        }
    }
}

fn gen_anchor(
    cfg: &SceneConfig,
    image_id: u64,
    anchor_id: u64,
    base: &Vector4<f64>,
    category: usize,
    sharpness: f64,
    noise: &NoiseModel,
) -> AnchorPrediction {
    let mut rng = derive_rng(cfg.seed, &[STREAM_ANCHOR, image_id, anchor_id]);
    let t = cfg.mc_runs as usize;
    let k = cfg.categories.len();
    let mut box_samples = Vec::with_capacity(t);
    let mut logit_samples = Vec::with_capacity(t);
    for _ in 0..t {
        box_samples.push(base + sample_noise(&mut rng, &noise.chol));
        let logits: Vec<f64> = (0..k)
            .map(|j| {
                let peak = if j == category { sharpness } else { 0.0 };
                let jitter: f64 = StandardNormal.sample(&mut rng);
                peak + LOGIT_NOISE_STD * jitter
            })
            .collect();
        logit_samples.push(logits);
    }
    AnchorPrediction::new(anchor_id, box_samples, vec![noise.reported; t], logit_samples)
        .expect("generated prediction is structurally valid")
}

fn gen_scene(cfg: &SceneConfig, image_id: u64, noise: &NoiseModel) -> SyntheticScene {
    let mut layout = derive_rng(cfg.seed, &[STREAM_LAYOUT, image_id]);
    let width = f64::from(cfg.image_width);
    let height = f64::from(cfg.image_height);

    let num_objects = layout.random_range(cfg.objects_per_image.clone());
    let mut ground_truth = Vec::with_capacity(num_objects as usize);
    for _ in 0..num_objects {
        let w = layout.random_range(cfg.box_size.clone());
        let h = layout.random_range(cfg.box_size.clone());
        let x1 = layout.random_range(0.0..=(width - w));
        let y1 = layout.random_range(0.0..=(height - h));
        let category_index = layout.random_range(0..cfg.categories.len());
        ground_truth.push(GroundTruthObject {
            image_id,
            bbox: BoundingBox::new(x1, y1, x1 + w, y1 + h).expect("generated box is ordered"),
            category_index,
        });
    }

    // object anchors first, then background anchors, ids sequential
    let mut plan: Vec<(Vector4<f64>, usize, f64, AnchorSource)> = Vec::new();
    for (gt_index, gt) in ground_truth.iter().enumerate() {
        let n = layout.random_range(cfg.anchors_per_object.clone());
        for _ in 0..n {
            plan.push((
                gt.bbox.corners(),
                gt.category_index,
                cfg.logit_sharpness,
                AnchorSource::Object { gt_index },
            ));
        }
    }
    let num_background = if cfg.false_anchor_rate > 0.0 {
        let poisson = Poisson::new(cfg.false_anchor_rate).expect("rate validated positive");
        poisson.sample(&mut layout) as usize
    } else {
        0
    };
    'bg: for _ in 0..num_background {
        for _ in 0..BACKGROUND_PLACEMENT_TRIES {
            let w = layout.random_range(cfg.box_size.clone());
            let h = layout.random_range(cfg.box_size.clone());
            let x1 = layout.random_range(0.0..=(width - w));
            let y1 = layout.random_range(0.0..=(height - h));
            let candidate = BoundingBox::new(x1, y1, x1 + w, y1 + h).unwrap();
            let clear = ground_truth
                .iter()
                .all(|g| crate::detection::iou(&candidate, &g.bbox) < BACKGROUND_IOU_CAP);
            if clear {
                let category = layout.random_range(0..cfg.categories.len());
                plan.push((
                    candidate.corners(),
                    category,
                    cfg.logit_sharpness * BACKGROUND_SHARPNESS_FACTOR,
                    AnchorSource::Background,
                ));
                continue 'bg;
            }
        }
        // crowded image: placement failed, skip this background anchor
    }

    let mut predictions = Vec::with_capacity(plan.len());
    let mut provenance = Vec::with_capacity(plan.len());
    for (anchor_id, (base, category, sharpness, source)) in plan.into_iter().enumerate() {
        predictions.push(gen_anchor(
            cfg,
            image_id,
            anchor_id as u64,
            &base,
            category,
            sharpness,
            noise,
        ));
        provenance.push(source);
    }
    SyntheticScene {
        image_id,
        ground_truth,
        predictions,
        provenance,
    }
}

/// Generates the full dataset; deterministic given the config (including
/// its seed).
pub fn generate_dataset(cfg: &SceneConfig) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    let true_cov = noise_covariance(cfg.noise_std, cfg.corner_correlation);
    let chol = if cfg.noise_std > 0.0 {
        Some(
            Cholesky::new(true_cov)
                .ok_or_else(|| Error::numerical("noise covariance not positive definite"))?
                .l(),
        )
    } else {
        None
    };
    let reported =
        true_cov * cfg.aleatoric_model.report_scale() + Matrix4::identity() * ALEATORIC_FLOOR;
    let noise = NoiseModel { chol, reported };
    Ok((0..u64::from(cfg.num_images))
        .map(|image_id| gen_scene(cfg, image_id, &noise))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::categorical_entropy;
    use crate::mc::aggregate_categorical;

    #[test]
    fn determinism() {
        let cfg = SceneConfig {
            num_images: 4,
            ..SceneConfig::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ground_truth, y.ground_truth);
            assert_eq!(x.predictions.len(), y.predictions.len());
            for (p, q) in x.predictions.iter().zip(&y.predictions) {
                assert_eq!(p.box_samples(), q.box_samples());
                assert_eq!(p.logit_samples(), q.logit_samples());
            }
        }
        let other = generate_dataset(&SceneConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(
            a[0].predictions[0].box_samples(),
            other[0].predictions[0].box_samples()
        );
    }

    #[test]
    fn zero_noise_reproduces_ground_truth() {
        let cfg = SceneConfig {
            num_images: 3,
            noise_std: 0.0,
            ..SceneConfig::default()
        };
        let scenes = generate_dataset(&cfg).unwrap();
        for scene in &scenes {
            for (pred, src) in scene.predictions.iter().zip(&scene.provenance) {
                if let AnchorSource::Object { gt_index } = src {
                    let gt = scene.ground_truth[*gt_index].bbox.corners();
                    for s in pred.box_samples() {
                        assert_eq!(s, &gt);
                    }
                }
            }
        }
    }

    #[test]
    fn every_object_has_an_anchor() {
        let scenes = generate_dataset(&SceneConfig::default()).unwrap();
        for scene in &scenes {
            for gt_index in 0..scene.ground_truth.len() {
                assert!(scene
                    .provenance
                    .iter()
                    .any(|s| *s == AnchorSource::Object { gt_index }));
            }
        }
    }

    #[test]
    fn empirical_noise_matches_config() {
        let cfg = SceneConfig {
            num_images: 300,
            ..SceneConfig::default()
        };
        let scenes = generate_dataset(&cfg).unwrap();
        let mut count = 0usize;
        let mut sum_sq = [0.0f64; 4];
        for scene in &scenes {
            for (pred, src) in scene.predictions.iter().zip(&scene.provenance) {
                if let AnchorSource::Object { gt_index } = src {
                    let gt = scene.ground_truth[*gt_index].bbox.corners();
                    for s in pred.box_samples() {
                        let err = s - gt;
                        for d in 0..4 {
                            sum_sq[d] += err[d] * err[d];
                        }
                        count += 1;
                    }
                }
            }
        }
        assert!(count > 10_000, "need a large sample, got {count}");
        for d in 0..4 {
            let std = (sum_sq[d] / count as f64).sqrt();
            assert!(
                (std - cfg.noise_std).abs() / cfg.noise_std < 0.05,
                "dimension {d}: empirical std {std} vs configured {}",
                cfg.noise_std
            );
        }
    }

    #[test]
    fn standardized_residuals_have_unit_variance() {
        let cfg = SceneConfig {
            num_images: 300,
            ..SceneConfig::default()
        };
        let scenes = generate_dataset(&cfg).unwrap();
        let whitener = Cholesky::new(noise_covariance(cfg.noise_std, cfg.corner_correlation))
            .unwrap()
            .l()
            .try_inverse()
            .unwrap();
        let mut count = 0usize;
        let mut sum_sq = [0.0f64; 4];
        for scene in &scenes {
            for (pred, src) in scene.predictions.iter().zip(&scene.provenance) {
                if let AnchorSource::Object { gt_index } = src {
                    let gt = scene.ground_truth[*gt_index].bbox.corners();
                    for s in pred.box_samples() {
                        let z = whitener * (s - gt);
                        for d in 0..4 {
                            sum_sq[d] += z[d] * z[d];
                        }
                        count += 1;
                    }
                }
            }
        }
        assert!(count >= 10_000);
        for d in 0..4 {
            let var = sum_sq[d] / count as f64;
            assert!(
                (0.9..=1.1).contains(&var),
                "dimension {d}: standardized variance {var}"
            );
        }
    }

    #[test]
    fn background_anchors_carry_more_categorical_entropy() {
        let scenes = generate_dataset(&SceneConfig {
            num_images: 50,
            ..SceneConfig::default()
        })
        .unwrap();
        let mut obj = (0.0, 0usize);
        let mut bg = (0.0, 0usize);
        for scene in &scenes {
            for (pred, src) in scene.predictions.iter().zip(&scene.provenance) {
                let h = categorical_entropy(&aggregate_categorical(pred));
                match src {
                    AnchorSource::Object { .. } => {
                        obj.0 += h;
                        obj.1 += 1;
                    }
                    AnchorSource::Background => {
                        bg.0 += h;
                        bg.1 += 1;
                    }
                }
            }
        }
        assert!(obj.1 > 0 && bg.1 > 0);
        let mean_obj = obj.0 / obj.1 as f64;
        let mean_bg = bg.0 / bg.1 as f64;
        assert!(
            mean_bg > mean_obj,
            "background entropy {mean_bg} should exceed object entropy {mean_obj}"
        );
    }

    #[test]
    fn oversized_boxes_rejected() {
        let cfg = SceneConfig {
            box_size: 40.0..=900.0,
            ..SceneConfig::default()
        };
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn config_parse_roundtrip() {
        let text = "\
# comment line
image_width = 320
image_height = 240
num_images = 7
categories = a, b, c, d
objects_per_image = 2..3
box_size = 30..60   # trailing comment
anchors_per_object = 2..4
false_anchor_rate = 1.5
noise_std = 1.0
corner_correlation = 0.2
aleatoric_model = underconfident
logit_sharpness = 3.0
mc_runs = 4
seed = 11
";
        let cfg = SceneConfig::parse(text).unwrap();
        assert_eq!(cfg.image_width, 320);
        assert_eq!(cfg.num_images, 7);
        assert_eq!(cfg.categories.len(), 4);
        assert_eq!(cfg.objects_per_image, 2..=3);
        assert_eq!(cfg.aleatoric_model, AleatoricModel::Underconfident);
        assert_eq!(cfg.mc_runs, 4);
        assert_eq!(cfg.seed, 11);

        assert!(SceneConfig::parse("bogus_key = 3").is_err());
        assert!(SceneConfig::parse("image_width").is_err());
        let err = SceneConfig::parse("image_width = x").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
