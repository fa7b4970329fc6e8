//! JSON-Lines wire formats: a header line with schema version and category
//! metadata, followed by one record per line.
//!
//! Readers validate everything a record promises (lengths against the
//! header, finiteness, box ordering, covariance positive definiteness,
//! entropy/score consistency) and report failures with the offending line
//! number. Floats round-trip losslessly through serde_json's shortest
//! representation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::detection::{
    categorical_entropy, gaussian_entropy, BoundingBox, BoxGaussian, CategoricalDist,
    CategoryTable,
};
use crate::error::{Error, Result};
use crate::fusion::{foreground_score, FinalDetection};
use crate::loss::{CovParam, LdlFactors, LossSample};
use crate::mc::AnchorPrediction;
use crate::metrics::GroundTruthObject;
use crate::priors::{BoxPrior, DirichletState};

pub const SCHEMA_VERSION: u32 = 1;

/// Tolerance when checking stored entropies and scores against recomputed
/// values on load.
const CONSISTENCY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Predictions,
    Detections,
    GroundTruth,
    LossSamples,
}

/// Covariance packing used by prediction records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovPacking {
    /// 10 values: row-major upper triangle of the 4x4 matrix.
    Upper,
    /// 4 values: the diagonal.
    Diag,
}

/// First line of every record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHeader {
    pub schema: u32,
    pub kind: FileKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_categories: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_runs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_packing: Option<CovPacking>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_height: Option<u32>,
}

impl FileHeader {
    fn base(kind: FileKind, categories: &CategoryTable) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            kind,
            num_categories: Some(categories.len()),
            categories: Some(categories.names().to_vec()),
            background_index: categories.background_index(),
            mc_runs: None,
            cov_packing: None,
            image_width: None,
            image_height: None,
        }
    }

    pub fn predictions(
        categories: &CategoryTable,
        mc_runs: usize,
        cov_packing: CovPacking,
        image_size: Option<(u32, u32)>,
    ) -> Self {
        Self {
            mc_runs: Some(mc_runs),
            cov_packing: Some(cov_packing),
            image_width: image_size.map(|s| s.0),
            image_height: image_size.map(|s| s.1),
            ..Self::base(FileKind::Predictions, categories)
        }
    }

    pub fn detections(categories: &CategoryTable, image_size: Option<(u32, u32)>) -> Self {
        Self {
            image_width: image_size.map(|s| s.0),
            image_height: image_size.map(|s| s.1),
            ..Self::base(FileKind::Detections, categories)
        }
    }

    pub fn ground_truth(categories: &CategoryTable, image_size: Option<(u32, u32)>) -> Self {
        Self {
            image_width: image_size.map(|s| s.0),
            image_height: image_size.map(|s| s.1),
            ..Self::base(FileKind::GroundTruth, categories)
        }
    }

    pub fn loss_samples() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            kind: FileKind::LossSamples,
            num_categories: None,
            categories: None,
            background_index: None,
            mc_runs: None,
            cov_packing: None,
            image_width: None,
            image_height: None,
        }
    }

    pub fn image_size(&self) -> Option<(u32, u32)> {
        Some((self.image_width?, self.image_height?))
    }

    /// Rebuilds the category table declared by the header.
    pub fn category_table(&self) -> Result<CategoryTable> {
        let names = self
            .categories
            .clone()
            .ok_or_else(|| Error::invalid("header lacks category names"))?;
        CategoryTable::new(names, self.background_index)
    }

    fn validate(&self, expected: FileKind, line: usize) -> Result<usize> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::parse(
                line,
                format!(
                    "schema version {} not supported (expected {SCHEMA_VERSION})",
                    self.schema
                ),
            ));
        }
        if self.kind != expected {
            return Err(Error::parse(
                line,
                format!("file kind {:?} where {expected:?} was expected", self.kind),
            ));
        }
        if expected == FileKind::LossSamples {
            return Ok(0);
        }
        let k = self
            .num_categories
            .ok_or_else(|| Error::parse(line, "header lacks num_categories"))?;
        match &self.categories {
            Some(names) if names.len() == k => {}
            Some(names) => {
                return Err(Error::parse(
                    line,
                    format!("num_categories {} but {} names listed", k, names.len()),
                ))
            }
            None => return Err(Error::parse(line, "header lacks category names")),
        }
        if let Some(b) = self.background_index {
            if b >= k {
                return Err(Error::parse(line, "background index out of range"));
            }
        }
        Ok(k)
    }
}

/// Row-major upper triangle of a symmetric 4x4 matrix.
pub fn pack_upper(m: &Matrix4<f64>) -> [f64; 10] {
    let mut out = [0.0; 10];
    let mut n = 0;
    for i in 0..4 {
        for j in i..4 {
            out[n] = m[(i, j)];
            n += 1;
        }
    }
    out
}

/// Inverse of [`pack_upper`]; the lower triangle mirrors the upper one.
pub fn unpack_upper(packed: &[f64; 10]) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    let mut n = 0;
    for i in 0..4 {
        for j in i..4 {
            m[(i, j)] = packed[n];
            m[(j, i)] = packed[n];
            n += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub anchor_id: u64,
    pub box_samples: Vec<[f64; 4]>,
    /// Per-run covariance, packed per the header's `cov_packing`.
    pub aleatoric_covs: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub box_mean: [f64; 4],
    pub box_cov: [f64; 10],
    pub probs: Vec<f64>,
    pub alpha: Vec<f64>,
    pub score: f64,
    pub gaussian_entropy: f64,
    pub categorical_entropy: f64,
    pub member_anchor_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub image_id: u64,
    pub box_corners: [f64; 4],
    pub category_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSampleRecord {
    pub prediction: [f64; 4],
    pub target: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_strict: Option<[f64; 6]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_d: Option<[f64; 4]>,
}

/// Parsed predictions file.
#[derive(Debug, Clone)]
pub struct PredictionsFile {
    pub header: FileHeader,
    /// (image id, prediction) in file order.
    pub anchors: Vec<(u64, AnchorPrediction)>,
}

impl PredictionsFile {
    /// Groups anchors by image, ordered by image id; anchors keep file order.
    pub fn by_image(&self) -> Vec<(u64, Vec<AnchorPrediction>)> {
        let mut out: Vec<(u64, Vec<AnchorPrediction>)> = Vec::new();
        let mut ids: Vec<u64> = self.anchors.iter().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            let preds = self
                .anchors
                .iter()
                .filter(|(i, _)| *i == id)
                .map(|(_, p)| p.clone())
                .collect();
            out.push((id, preds));
        }
        out
    }
}

/// Parsed detections file.
#[derive(Debug, Clone)]
pub struct DetectionsFile {
    pub header: FileHeader,
    pub detections: Vec<(u64, FinalDetection)>,
}

/// Parsed ground-truth file.
#[derive(Debug, Clone)]
pub struct GroundTruthFile {
    pub header: FileHeader,
    pub objects: Vec<GroundTruthObject>,
}

/// Parsed loss-sample file.
#[derive(Debug, Clone)]
pub struct LossSamplesFile {
    pub header: FileHeader,
    pub samples: Vec<LossSample>,
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str, line_no: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::parse(line_no, e.to_string()))
}

fn read_lines<R: BufRead>(reader: R) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((idx + 1, line));
        }
    }
    Ok(out)
}

fn read_header(lines: &[(usize, String)], expected: FileKind) -> Result<(FileHeader, usize)> {
    let (line_no, text) = lines
        .first()
        .ok_or_else(|| Error::parse(1, "empty file: missing header line"))?;
    let header: FileHeader = parse_line(text, *line_no)?;
    let k = header.validate(expected, *line_no)?;
    Ok((header, k))
}

pub fn read_predictions_from<R: BufRead>(reader: R) -> Result<PredictionsFile> {
    let lines = read_lines(reader)?;
    let (header, k) = read_header(&lines, FileKind::Predictions)?;
    let t = header
        .mc_runs
        .ok_or_else(|| Error::parse(lines[0].0, "predictions header lacks mc_runs"))?;
    if t == 0 {
        return Err(Error::parse(lines[0].0, "mc_runs must be at least 1"));
    }
    let packing = header
        .cov_packing
        .ok_or_else(|| Error::parse(lines[0].0, "predictions header lacks cov_packing"))?;
    let cov_width = match packing {
        CovPacking::Upper => 10,
        CovPacking::Diag => 4,
    };

    let mut anchors = Vec::new();
    for (line_no, text) in &lines[1..] {
        let rec: PredictionRecord = parse_line(text, *line_no)?;
        if rec.box_samples.len() != t || rec.aleatoric_covs.len() != t || rec.logits.len() != t {
            return Err(Error::parse(
                *line_no,
                format!("record does not carry {t} runs"),
            ));
        }
        let mut covs = Vec::with_capacity(t);
        for packed in &rec.aleatoric_covs {
            if packed.len() != cov_width {
                return Err(Error::parse(
                    *line_no,
                    format!(
                        "covariance has {} values, expected {cov_width} for {packing:?} packing",
                        packed.len()
                    ),
                ));
            }
            let m = match packing {
                CovPacking::Upper => {
                    let mut arr = [0.0; 10];
                    arr.copy_from_slice(packed);
                    unpack_upper(&arr)
                }
                CovPacking::Diag => {
                    Matrix4::from_diagonal(&Vector4::new(packed[0], packed[1], packed[2], packed[3]))
                }
            };
            covs.push(m);
        }
        for row in &rec.logits {
            if row.len() != k {
                return Err(Error::parse(
                    *line_no,
                    format!("logit row has {} entries, expected {k}", row.len()),
                ));
            }
        }
        let samples = rec.box_samples.iter().map(|s| Vector4::from(*s)).collect();
        let pred = AnchorPrediction::new(rec.anchor_id, samples, covs, rec.logits)
            .map_err(|e| Error::parse(*line_no, e.to_string()))?;
        anchors.push((rec.image_id, pred));
    }
    Ok(PredictionsFile { header, anchors })
}

pub fn read_detections_from<R: BufRead>(reader: R) -> Result<DetectionsFile> {
    let lines = read_lines(reader)?;
    let (header, k) = read_header(&lines, FileKind::Detections)?;
    let background = header.background_index;
    let mut detections = Vec::new();
    for (line_no, text) in &lines[1..] {
        let rec: DetectionRecord = parse_line(text, *line_no)?;
        if rec.probs.len() != k || rec.alpha.len() != k {
            return Err(Error::parse(
                *line_no,
                format!(
                    "record carries {} probabilities / {} pseudo-counts, expected {k}",
                    rec.probs.len(),
                    rec.alpha.len()
                ),
            ));
        }
        let bbox = BoxGaussian::new(Vector4::from(rec.box_mean), unpack_upper(&rec.box_cov))
            .map_err(|e| Error::parse(*line_no, e.to_string()))?;
        let category = CategoricalDist::new(rec.probs)
            .map_err(|e| Error::parse(*line_no, e.to_string()))?;
        let dirichlet = DirichletState::new(rec.alpha)
            .map_err(|e| Error::parse(*line_no, e.to_string()))?;
        let expect_g = gaussian_entropy(&bbox);
        if (rec.gaussian_entropy - expect_g).abs() > CONSISTENCY_TOL * expect_g.abs().max(1.0) {
            return Err(Error::parse(
                *line_no,
                format!(
                    "stored Gaussian entropy {} inconsistent with covariance ({expect_g})",
                    rec.gaussian_entropy
                ),
            ));
        }
        let expect_c = categorical_entropy(&category);
        if (rec.categorical_entropy - expect_c).abs() > CONSISTENCY_TOL * expect_c.abs().max(1.0) {
            return Err(Error::parse(
                *line_no,
                format!(
                    "stored categorical entropy {} inconsistent with probabilities ({expect_c})",
                    rec.categorical_entropy
                ),
            ));
        }
        let expect_score = foreground_score(&category, background);
        if (rec.score - expect_score).abs() > CONSISTENCY_TOL {
            return Err(Error::parse(
                *line_no,
                format!("stored score {} inconsistent with probabilities", rec.score),
            ));
        }
        detections.push((
            rec.image_id,
            FinalDetection {
                bbox,
                category,
                dirichlet,
                score: rec.score,
                gaussian_entropy: rec.gaussian_entropy,
                categorical_entropy: rec.categorical_entropy,
                member_anchor_ids: rec.member_anchor_ids,
            },
        ));
    }
    Ok(DetectionsFile { header, detections })
}

pub fn read_ground_truth_from<R: BufRead>(reader: R) -> Result<GroundTruthFile> {
    let lines = read_lines(reader)?;
    let (header, k) = read_header(&lines, FileKind::GroundTruth)?;
    let mut objects = Vec::new();
    for (line_no, text) in &lines[1..] {
        let rec: GroundTruthRecord = parse_line(text, *line_no)?;
        if rec.category_index >= k {
            return Err(Error::parse(
                *line_no,
                format!("category index {} out of range for {k}", rec.category_index),
            ));
        }
        let bbox = BoundingBox::new(
            rec.box_corners[0],
            rec.box_corners[1],
            rec.box_corners[2],
            rec.box_corners[3],
        )
        .map_err(|e| Error::parse(*line_no, e.to_string()))?;
        objects.push(GroundTruthObject {
            image_id: rec.image_id,
            bbox,
            category_index: rec.category_index,
        });
    }
    Ok(GroundTruthFile { header, objects })
}

pub fn read_loss_samples_from<R: BufRead>(reader: R) -> Result<LossSamplesFile> {
    let lines = read_lines(reader)?;
    let (header, _) = read_header(&lines, FileKind::LossSamples)?;
    let mut samples = Vec::new();
    for (line_no, text) in &lines[1..] {
        let rec: LossSampleRecord = parse_line(text, *line_no)?;
        let sample = match (rec.variance, rec.l_strict, rec.log_d) {
            (Some(v), None, None) => LossSample::diagonal(rec.prediction, rec.target, v),
            (None, Some(l), Some(d)) => LdlFactors::new(l, d)
                .and_then(|f| LossSample::multivariate(rec.prediction, rec.target, f)),
            _ => Err(Error::invalid(
                "record must carry either variance or l_strict plus log_d",
            )),
        }
        .map_err(|e| Error::parse(*line_no, e.to_string()))?;
        samples.push(sample);
    }
    Ok(LossSamplesFile { header, samples })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionsFile> {
    read_predictions_from(open(path.as_ref())?)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<DetectionsFile> {
    read_detections_from(open(path.as_ref())?)
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruthFile> {
    read_ground_truth_from(open(path.as_ref())?)
}

pub fn read_loss_samples(path: impl AsRef<Path>) -> Result<LossSamplesFile> {
    read_loss_samples_from(open(path.as_ref())?)
}

fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    let line = serde_json::to_string(value)
        .map_err(|e| Error::invalid(format!("serialization failed: {e}")))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Serializes a prediction per the header's packing.
fn prediction_record(
    image_id: u64,
    pred: &AnchorPrediction,
    packing: CovPacking,
) -> PredictionRecord {
    PredictionRecord {
        image_id,
        anchor_id: pred.anchor_id(),
        box_samples: pred.box_samples().iter().map(|s| [s[0], s[1], s[2], s[3]]).collect(),
        aleatoric_covs: pred
            .aleatoric_covs()
            .iter()
            .map(|c| match packing {
                CovPacking::Upper => pack_upper(c).to_vec(),
                CovPacking::Diag => c.diagonal().iter().copied().collect(),
            })
            .collect(),
        logits: pred.logit_samples().to_vec(),
    }
}

pub fn write_predictions_to<W: Write>(
    mut w: W,
    header: &FileHeader,
    anchors: &[(u64, AnchorPrediction)],
) -> Result<()> {
    let packing = header
        .cov_packing
        .ok_or_else(|| Error::invalid("predictions header lacks cov_packing"))?;
    write_json_line(&mut w, header)?;
    for (image_id, pred) in anchors {
        write_json_line(&mut w, &prediction_record(*image_id, pred, packing))?;
    }
    Ok(())
}

pub fn detection_record(image_id: u64, det: &FinalDetection) -> DetectionRecord {
    let m = det.bbox.mean();
    DetectionRecord {
        image_id,
        box_mean: [m[0], m[1], m[2], m[3]],
        box_cov: pack_upper(det.bbox.cov()),
        probs: det.category.probs().to_vec(),
        alpha: det.dirichlet.alpha().to_vec(),
        score: det.score,
        gaussian_entropy: det.gaussian_entropy,
        categorical_entropy: det.categorical_entropy,
        member_anchor_ids: det.member_anchor_ids.clone(),
    }
}

pub fn write_detections_to<W: Write>(
    mut w: W,
    header: &FileHeader,
    detections: &[(u64, FinalDetection)],
) -> Result<()> {
    write_json_line(&mut w, header)?;
    for (image_id, det) in detections {
        write_json_line(&mut w, &detection_record(*image_id, det))?;
    }
    Ok(())
}

pub fn write_ground_truth_to<W: Write>(
    mut w: W,
    header: &FileHeader,
    objects: &[GroundTruthObject],
) -> Result<()> {
    write_json_line(&mut w, header)?;
    for g in objects {
        let b = g.bbox;
        write_json_line(
            &mut w,
            &GroundTruthRecord {
                image_id: g.image_id,
                box_corners: [b.x1(), b.y1(), b.x2(), b.y2()],
                category_index: g.category_index,
            },
        )?;
    }
    Ok(())
}

pub fn write_loss_samples_to<W: Write>(mut w: W, samples: &[LossSample]) -> Result<()> {
    write_json_line(&mut w, &FileHeader::loss_samples())?;
    for s in samples {
        let (variance, l_strict, log_d) = match &s.cov {
            CovParam::Diagonal(v) => (Some(*v), None, None),
            CovParam::Factors(f) => (None, Some(*f.l_strict()), Some(*f.log_d())),
        };
        write_json_line(
            &mut w,
            &LossSampleRecord {
                prediction: s.prediction,
                target: s.target,
                variance,
                l_strict,
                log_d,
            },
        )?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_predictions(
    path: impl AsRef<Path>,
    header: &FileHeader,
    anchors: &[(u64, AnchorPrediction)],
) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_predictions_to(&mut w, header, anchors)?;
    w.flush()?;
    Ok(())
}

pub fn write_detections(
    path: impl AsRef<Path>,
    header: &FileHeader,
    detections: &[(u64, FinalDetection)],
) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_detections_to(&mut w, header, detections)?;
    w.flush()?;
    Ok(())
}

pub fn write_ground_truth(
    path: impl AsRef<Path>,
    header: &FileHeader,
    objects: &[GroundTruthObject],
) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_ground_truth_to(&mut w, header, objects)?;
    w.flush()?;
    Ok(())
}

pub fn write_loss_samples(path: impl AsRef<Path>, samples: &[LossSample]) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_loss_samples_to(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

/// Informative prior specification loaded from a JSON file: a Gaussian box
/// prior (mean plus packed covariance, both or neither) and optional
/// Dirichlet pseudo-counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_mean: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_cov: Option<[f64; 10]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
}

impl PriorSpec {
    pub fn into_priors(self) -> Result<(BoxPrior, Option<Vec<f64>>)> {
        let box_prior = match (self.box_mean, self.box_cov) {
            (Some(mean), Some(cov)) => {
                BoxPrior::Gaussian(BoxGaussian::new(Vector4::from(mean), unpack_upper(&cov))?)
            }
            (None, None) => BoxPrior::NonInformative,
            _ => {
                return Err(Error::invalid(
                    "prior file must carry box_mean and box_cov together",
                ))
            }
        };
        Ok((box_prior, self.alpha))
    }
}

pub fn read_prior_spec(path: impl AsRef<Path>) -> Result<(BoxPrior, Option<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let spec: PriorSpec =
        serde_json::from_str(&text).map_err(|e| Error::parse(1, e.to_string()))?;
    spec.into_priors()
}
