//! Trained model: training pipeline, prediction, and the on-disk container.
//!
//! File layout:
//!
//! ```text
//! POSEKIT-MODEL 1
//! {"schema": ..., "tensors": [{"name", "rows", "cols", "offset"}], ...}
//! END-HEADER
//! <little-endian f64 payload, tensors column-major at their offsets>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{argmax, train, ClassifierHead, EpochLog, Extractor, ExtractorKind, PatchSpec, TrainConfig};
use crate::cluster::{build_pose_classes, membership_histogram, membership_sets, PoseClassSet};
use crate::data::{Dataset, DatasetSchema};
use crate::error::{Error, Result};
use crate::eval::metrics::{mean, pt_pt_error};
use crate::image::GrayImage;
use crate::inference::{map_class, PosePosterior};
use crate::refine::{
    refine_bbox, train_bbox_regressor, train_pose_regressors, BBoxRegressor, CascadeConfig, CascadeTrainLog, CascadedRegressor,
    LocalFeatureSpec, RegressionData,
};
use crate::shape::{denormalize_shape, BBox, Point, Shape};

pub const MODEL_MAGIC: &str = "POSEKIT-MODEL";
pub const MODEL_VERSION: u32 = 1;
const HEADER_END: &str = "END-HEADER";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// number of pose classes; absent means one class per training example
    pub k: Option<usize>,
    pub tau: f64,
    pub patch: PatchSpec,
    pub extractor: ExtractorKind,
    pub train: TrainConfig,
    pub temperature: f64,
    pub refine: bool,
    pub cascade: CascadeConfig,
    /// ridge strengths tried for the cascade when validation data is given
    pub lambda_grid: Vec<f64>,
    pub bbox_refine: bool,
    pub bbox_lambda: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: None,
            tau: 0.1,
            patch: PatchSpec::default(),
            extractor: ExtractorKind::default(),
            train: TrainConfig::default(),
            temperature: 1.0,
            refine: true,
            cascade: CascadeConfig::default(),
            lambda_grid: vec![0.1, 1.0, 10.0],
            bbox_refine: true,
            bbox_lambda: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub landmarks: DatasetSchema,
    pub classes: PoseClassSet,
    /// mean canonical training shape
    pub mean_shape: Shape,
    pub head: ClassifierHead,
    pub extractor: Extractor,
    pub config: ModelConfig,
    pub fingerprint: String,
    pub cascade: Option<CascadedRegressor>,
    pub bbox: Option<BBoxRegressor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub m: usize,
    pub k: usize,
    pub epochs: Vec<EpochLog>,
    /// membership set size -> number of examples
    pub membership_histogram: BTreeMap<usize, usize>,
    pub cascade: Option<CascadeTrainLog>,
    /// `(lambda, validation mean error)` per tried strength
    pub lambda_scores: Vec<(f64, f64)>,
    pub lambda: Option<f64>,
}

/// One frame's prediction in both frames of reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: BBox,
    pub map_class: usize,
    /// canonical frame of `bbox`
    pub shape: Shape,
    pub landmarks: Vec<Point>,
}

impl Model {
    pub fn k(&self) -> usize {
        self.classes.k()
    }

    pub fn n_points(&self) -> usize {
        self.classes.n_points()
    }

    pub fn dim(&self) -> usize {
        self.extractor.dim()
    }

    pub fn tau(&self) -> f64 {
        self.config.tau
    }

    pub fn features(&self, image: &GrayImage, bbox: &BBox) -> Result<Vec<f64>> {
        bbox.validate()?;
        self.extractor.extract_one(&self.config.patch.extract(image, bbox))
    }

    pub fn posterior(&self, image: &GrayImage, bbox: &BBox) -> Result<PosePosterior> {
        let f = self.features(image, bbox)?;
        PosePosterior::from_scores(&self.head.scores(&f)?, self.config.temperature)
    }

    /// Detection window after the one-shot box regressor, when present.
    pub fn refine_box(&self, image: &GrayImage, bbox: &BBox) -> Result<BBox> {
        match &self.bbox {
            Some(r) => refine_bbox(r, &self.extractor, &self.config.patch, image, bbox),
            None => Ok(*bbox),
        }
    }

    /// Shape for class `k`, run through its cascade when `refine` is set.
    pub fn class_shape(&self, image: &GrayImage, bbox: &BBox, k: usize, refine: bool) -> Result<Shape> {
        match (&self.cascade, refine) {
            (Some(c), true) => c.apply(&self.classes, image, k, bbox),
            _ => self
                .classes
                .centers
                .get(k)
                .cloned()
                .ok_or(Error::IndexOutOfRange { index: k, len: self.k() }),
        }
    }

    pub fn prediction_for_class(&self, image: &GrayImage, bbox: &BBox, k: usize, refine: bool) -> Result<Prediction> {
        let shape = self.class_shape(image, bbox, k, refine)?;
        Ok(Prediction {
            bbox: *bbox,
            map_class: k,
            landmarks: denormalize_shape(&shape, bbox)?,
            shape,
        })
    }

    /// MAP prediction with the posterior it came from.
    pub fn predict(&self, image: &GrayImage, bbox: &BBox, refine: bool) -> Result<(Prediction, PosePosterior)> {
        let p = self.posterior(image, bbox)?;
        Ok((self.prediction_for_class(image, bbox, map_class(&p), refine)?, p))
    }

    /// Predictions for every record, framed by the ground-truth box or by
    /// the (optionally refined) detection.
    pub fn predict_dataset(&self, dataset: &Dataset, frame: FrameSource, refine: bool) -> Result<Vec<(Prediction, PosePosterior)>> {
        dataset
            .records
            .par_iter()
            .map(|r| {
                let bbox = match frame {
                    FrameSource::GroundTruth => r.annotation.bbox,
                    FrameSource::Detection => {
                        let d = r.detection.unwrap_or(r.annotation.bbox);
                        self.refine_box(&r.image, &d)?
                    }
                };
                self.predict(&r.image, &bbox, refine)
            })
            .collect()
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            k: self.k(),
            n: self.n_points(),
            d: self.dim(),
            tau: self.tau(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    #[default]
    GroundTruth,
    Detection,
}

/// Trains classes, head, and the optional refiners. The cascade strength is
/// picked on `val` when it is given, otherwise `cfg.cascade.lambda` is used.
pub fn train_model(train_set: &Dataset, val: Option<&Dataset>, cfg: &ModelConfig) -> Result<(Model, TrainReport)> {
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if !(cfg.tau >= 0.0) {
        return Err(Error::Config(format!("tau must be >= 0, got {}", cfg.tau)));
    }
    let m = train_set.len();
    let k = cfg.k.unwrap_or(m);
    let items: Vec<(&GrayImage, BBox)> = train_set.records.iter().map(|r| (&r.image, r.annotation.bbox)).collect();
    let patches = cfg.patch.extract_all(&items);
    let shapes = train_set.shapes()?;
    let (classes, _) = build_pose_classes(&shapes, k, cfg.seed)?;
    let mem = membership_sets(&classes, &shapes, cfg.tau)?;
    let mut extractor = Extractor::new(cfg.extractor, cfg.patch.len(), cfg.seed)?;
    extractor.fit(&patches);
    let outcome = train(&patches, &mut extractor, &mem, k, &cfg.train)?;

    let mut report = TrainReport {
        m,
        k,
        epochs: outcome.log,
        membership_histogram: membership_histogram(&mem),
        cascade: None,
        lambda_scores: Vec::new(),
        lambda: None,
    };
    let mut model = Model {
        landmarks: train_set.schema.clone(),
        mean_shape: Shape::mean(shapes.iter())?,
        classes,
        head: outcome.head,
        extractor,
        config: cfg.clone(),
        fingerprint: cfg.fingerprint(),
        cascade: None,
        bbox: None,
    };

    if cfg.refine {
        let data = RegressionData {
            images: items.iter().map(|x| x.0).collect(),
            boxes: items.iter().map(|x| x.1).collect(),
            shapes: shapes.clone(),
        };
        let grid: Vec<f64> = match val {
            Some(_) if !cfg.lambda_grid.is_empty() => cfg.lambda_grid.clone(),
            _ => vec![cfg.cascade.lambda],
        };
        let val_classes: Option<Vec<usize>> = val
            .map(|v| {
                v.records
                    .par_iter()
                    .map(|r| Ok(map_class(&model.posterior(&r.image, &r.annotation.bbox)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let mut best: Option<(f64, CascadedRegressor, CascadeTrainLog, f64)> = None;
        for &lambda in &grid {
            let c = CascadeConfig {
                lambda,
                seed: cfg.seed,
                ..cfg.cascade.clone()
            };
            let (casc, log) = train_pose_regressors(&data, &model.classes, &mem, &c)?;
            let score = match (val, &val_classes) {
                (Some(v), Some(ks)) => {
                    let errs: Vec<f64> = v
                        .records
                        .par_iter()
                        .zip(ks)
                        .map(|(r, &k)| {
                            let s = casc.apply(&model.classes, &r.image, k, &r.annotation.bbox)?;
                            pt_pt_error(&denormalize_shape(&s, &r.annotation.bbox)?, &r.annotation)
                        })
                        .collect::<Result<_>>()?;
                    let e = mean(&errs);
                    report.lambda_scores.push((lambda, e));
                    e
                }
                _ => 0.0,
            };
            if best.as_ref().is_none_or(|b| score < b.3) {
                best = Some((lambda, casc, log, score));
            }
        }
        let (lambda, casc, log, _) = best.expect("grid is nonempty");
        report.lambda = Some(lambda);
        report.cascade = Some(log);
        model.cascade = Some(casc);
    }

    if cfg.bbox_refine && train_set.records.iter().all(|r| r.detection.is_some()) {
        let dets: Vec<BBox> = train_set.records.iter().map(|r| r.detection.expect("checked")).collect();
        let truths: Vec<BBox> = train_set.records.iter().map(|r| r.annotation.bbox).collect();
        let det_items: Vec<(&GrayImage, BBox)> = train_set.records.iter().zip(&dets).map(|(r, d)| (&r.image, *d)).collect();
        let feats = model.extractor.forward(&cfg.patch.extract_all(&det_items))?;
        model.bbox = Some(train_bbox_regressor(&feats, &dets, &truths, cfg.bbox_lambda)?);
    }
    Ok((model, report))
}

/// MAP class of each column of `features`.
pub fn map_classes(head: &ClassifierHead, features: &DMatrix<f64>) -> Vec<usize> {
    head.scores_batch(features).column_iter().map(|c| argmax(c.as_slice())).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CascadeHeader {
    features: LocalFeatureSpec,
    class_group: Vec<usize>,
    levels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    n_points: usize,
    dim: usize,
    k: usize,
    exemplar: bool,
    landmarks: DatasetSchema,
    extractor: ExtractorKind,
    config: ModelConfig,
    fingerprint: String,
    cascade: Option<CascadeHeader>,
    bbox_lambda: Option<f64>,
    tensors: Vec<TensorEntry>,
}

fn matrix_tensor(name: String, m: &DMatrix<f64>) -> (String, usize, usize, Vec<f64>) {
    (name, m.nrows(), m.ncols(), m.as_slice().to_vec())
}

/// Serialized bytes of `model`.
pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
    let centers: Vec<f64> = model.classes.centers.iter().flat_map(|c| c.as_flat().iter().copied()).collect();
    tensors.push(("classes.centers".into(), 2 * model.n_points(), model.k(), centers));
    tensors.push(("classes.bandwidths".into(), model.k(), 1, model.classes.bandwidths.clone()));
    tensors.push(("mean_shape".into(), 2 * model.n_points(), 1, model.mean_shape.as_flat().to_vec()));
    tensors.push(matrix_tensor("head.weights".into(), &model.head.weights));
    tensors.push(("head.bias".into(), model.k(), 1, model.head.bias.as_slice().to_vec()));
    for (name, r, c, v) in model.extractor.tensors() {
        tensors.push((format!("extractor.{name}"), r, c, v));
    }
    let cascade = model.cascade.as_ref().map(|c| {
        for (g, levels) in c.levels.iter().enumerate() {
            for (l, w) in levels.iter().enumerate() {
                tensors.push(matrix_tensor(format!("cascade.{g}.{l}"), w));
            }
        }
        CascadeHeader {
            features: c.features,
            class_group: c.class_group.clone(),
            levels: c.levels.first().map_or(0, Vec::len),
        }
    });
    if let Some(b) = &model.bbox {
        tensors.push(matrix_tensor("bbox.weights".into(), &b.weights));
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, rows, cols, v) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: *rows,
            cols: *cols,
            offset,
        });
        offset += v.len();
    }
    let header = ModelHeader {
        version: MODEL_VERSION,
        n_points: model.n_points(),
        dim: model.dim(),
        k: model.k(),
        exemplar: model.classes.exemplar,
        landmarks: model.landmarks.clone(),
        extractor: model.extractor.kind(),
        config: model.config.clone(),
        fingerprint: model.fingerprint.clone(),
        cascade,
        bbox_lambda: model.bbox.as_ref().map(|b| b.lambda),
        tensors: entries,
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Schema(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 64 + 8 * offset);
    writeln!(out, "{MODEL_MAGIC} {MODEL_VERSION}").expect("vec write");
    writeln!(out, "{json}").expect("vec write");
    writeln!(out, "{HEADER_END}").expect("vec write");
    for (_, _, _, v) in &tensors {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(model)?;
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    model_from_bytes(&bytes).map_err(|e| match e {
        Error::Format { msg, .. } => Error::Format {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        path: Default::default(),
        msg: msg.into(),
    }
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| format_err("truncated header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| format_err("header is not UTF-8"))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut pos = 0;
    let magic = next_line(bytes, &mut pos)?;
    let version = magic
        .strip_prefix(MODEL_MAGIC)
        .map(str::trim)
        .ok_or_else(|| format_err("not a model file"))?;
    if version != MODEL_VERSION.to_string() {
        return Err(format_err(format!("unsupported model version {version}")));
    }
    let header: ModelHeader = serde_json::from_str(next_line(bytes, &mut pos)?).map_err(|e| format_err(format!("bad header: {e}")))?;
    if next_line(bytes, &mut pos)? != HEADER_END {
        return Err(format_err("missing END-HEADER"));
    }
    let payload = &bytes[pos..];
    if payload.len() % 8 != 0 {
        return Err(format_err("payload length is not a multiple of 8"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut tensors: BTreeMap<String, (usize, usize, Vec<f64>)> = BTreeMap::new();
    for t in &header.tensors {
        let len = t.rows * t.cols;
        let slice = values
            .get(t.offset..t.offset + len)
            .ok_or_else(|| format_err(format!("tensor {} runs past the payload", t.name)))?;
        tensors.insert(t.name.clone(), (t.rows, t.cols, slice.to_vec()));
    }
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    if expected != values.len() {
        return Err(format_err("payload size disagrees with the tensor table"));
    }
    let mut take = |name: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
        let (r, c, v) = tensors.remove(name).ok_or_else(|| format_err(format!("tensor {name} missing")))?;
        if r != rows || c != cols {
            return Err(Error::Schema(format!("tensor {name} is {r}x{c}, expected {rows}x{cols}")));
        }
        Ok(DMatrix::from_vec(r, c, v))
    };
    let (n2, k, d) = (2 * header.n_points, header.k, header.dim);
    let centers = take("classes.centers", n2, k)?;
    let centers: Vec<Shape> = centers
        .column_iter()
        .map(|c| Shape::from_flat(c.as_slice().to_vec()))
        .collect::<Result<_>>()?;
    let bandwidths = take("classes.bandwidths", k, 1)?.as_slice().to_vec();
    let classes = PoseClassSet::new(centers, bandwidths, header.exemplar)?;
    let mean_shape = Shape::from_flat(take("mean_shape", n2, 1)?.as_slice().to_vec())?;
    let head = ClassifierHead::new(take("head.weights", k, d)?, DVector::from_vec(take("head.bias", k, 1)?.as_slice().to_vec()))?;
    let cascade = match &header.cascade {
        Some(ch) => {
            let groups = ch.class_group.iter().max().map_or(0, |g| g + 1);
            let rows = ch.features.len(header.n_points) + 1;
            let mut levels = Vec::with_capacity(groups);
            for g in 0..groups {
                let mut lv = Vec::with_capacity(ch.levels);
                for l in 0..ch.levels {
                    lv.push(take(&format!("cascade.{g}.{l}"), rows, n2)?);
                }
                levels.push(lv);
            }
            if ch.class_group.len() != k {
                return Err(Error::Schema("cascade group map does not cover every class".into()));
            }
            Some(CascadedRegressor {
                features: ch.features,
                class_group: ch.class_group.clone(),
                levels,
            })
        }
        None => None,
    };
    let bbox = match header.bbox_lambda {
        Some(lambda) => Some(BBoxRegressor {
            weights: take("bbox.weights", d + 1, 4)?,
            lambda,
        }),
        None => None,
    };
    let ext_tensors: Vec<(String, usize, usize, Vec<f64>)> = tensors
        .into_iter()
        .filter_map(|(name, (r, c, v))| name.strip_prefix("extractor.").map(|n| (n.to_string(), r, c, v)))
        .collect();
    let extractor = Extractor::from_tensors(header.extractor, ext_tensors)?;
    if extractor.dim() != d || extractor.input_dim() != header.config.patch.len() {
        return Err(Error::Schema("extractor dimensions disagree with the header".into()));
    }
    Ok(Model {
        landmarks: header.landmarks,
        classes,
        mean_shape,
        head,
        extractor,
        config: header.config,
        fingerprint: header.fingerprint,
        cascade,
        bbox,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SyntheticConfig};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            k: Some(12),
            extractor: ExtractorKind::Random { dim: 32 },
            patch: PatchSpec { size: 12, margin: 1.25 },
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            cascade: CascadeConfig {
                groups: 3,
                levels: 2,
                ..CascadeConfig::default()
            },
            lambda_grid: vec![1.0, 10.0],
            ..ModelConfig::default()
        }
    }

    fn tiny_data(seed: u64) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n_examples: 40,
            n_landmarks: 7,
            image_size: 40,
            face_size: [18.0, 22.0],
            detection_jitter: 0.1,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let tr = tiny_data(1);
        let va = tiny_data(2);
        let (model, report) = train_model(&tr, Some(&va), &tiny_config()).unwrap();
        assert_eq!(report.lambda_scores.len(), 2);
        assert!(model.cascade.is_some());
        assert!(model.bbox.is_some());
        let bytes = model_to_bytes(&model).unwrap();
        assert!(bytes.starts_with(b"POSEKIT-MODEL 1\n"));
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        let r = &va.records[0];
        assert_eq!(
            back.predict(&r.image, &r.annotation.bbox, true).unwrap(),
            model.predict(&r.image, &r.annotation.bbox, true).unwrap()
        );
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = tiny_config();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.tau = 0.2;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (model, _) = train_model(
            &tiny_data(3),
            None,
            &ModelConfig {
                refine: false,
                bbox_refine: false,
                ..tiny_config()
            },
        )
        .unwrap();
        assert!(model.cascade.is_none() && model.bbox.is_none());
        let bytes = model_to_bytes(&model).unwrap();
        assert!(model_from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(model_from_bytes(b"NOT-A-MODEL 1\n{}\nEND-HEADER\n").is_err());
        let mut v2 = bytes.clone();
        v2[14] = b'9';
        assert!(model_from_bytes(&v2).is_err());
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.model");
        match load_model(&missing) {
            Err(Error::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("{other:?}"),
        }
        let p = dir.path().join("m.model");
        save_model(&model, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), model);
    }
}
