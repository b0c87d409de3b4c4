//! Interactive annotation over a video: per-frame posteriors, landmark
//! clicks as evidence, HMM propagation, and export.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{serialize_pts, Dataset};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::inference::{condition, default_tolerance, map_class, marginal_heatmap, mixture, Evidence, GridSpec, PosePosterior};
use crate::model::{FrameSource, Model, Prediction};
use crate::shape::{BBox, Point};
use crate::temporal::{viterbi, DecodeParams, FrameSequence, TransitionStructure};

/// Hypotheses listed per frame.
pub const TOP_K: usize = 5;
/// Heatmaps cover this half-width around the box center, canonical units.
pub const HEATMAP_HALF_WIDTH: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SessionSource {
    Video { video_id: String },
    Frames { frames: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
struct SessionFrame {
    record: usize,
    frame_index: Option<usize>,
    image: GrayImage,
    bbox: BBox,
    base: PosePosterior,
    posterior: PosePosterior,
    evidence: Vec<Evidence>,
}

/// A click in pixel coordinates; `tolerance` is in canonical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelEvidence {
    pub landmark: usize,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopClass {
    pub class: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    /// position in the session
    pub index: usize,
    pub frame_index: Option<usize>,
    pub map_class: usize,
    pub landmarks: Vec<Point>,
    pub bbox: BBox,
    pub top_k: Vec<TopClass>,
    pub evidence_count: usize,
    /// whether the shown class came from the last decode
    pub decoded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelHeatmap {
    pub landmark: usize,
    pub res: usize,
    /// pixel extent of the grid
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// row-major, `res` rows of `res` cells, summing to one
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub frame_index: Option<usize>,
    pub file: String,
    pub map_class: usize,
    pub evidence_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub session_id: String,
    pub source: SessionSource,
    pub version: u64,
    pub frames: Vec<ManifestEntry>,
}

/// In-memory export: `.pts` documents keyed by file name plus the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub manifest: ExportManifest,
    pub files: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct AnnotationSession {
    pub id: String,
    pub source: SessionSource,
    model: Arc<Model>,
    frames: Vec<SessionFrame>,
    frame_source: FrameSource,
    refine: bool,
    decoded: Option<Vec<usize>>,
    transitions: Option<(DecodeParams, TransitionStructure)>,
    version: u64,
}

impl AnnotationSession {
    /// Computes base posteriors for the frames of `source`.
    pub fn new(
        id: impl Into<String>,
        model: Arc<Model>,
        dataset: &Dataset,
        source: SessionSource,
        frame_source: FrameSource,
        refine: bool,
    ) -> Result<Self> {
        let records = match &source {
            SessionSource::Video { video_id } => {
                let r = dataset.video_frames(video_id);
                if r.is_empty() {
                    return Err(Error::NotFound(format!("video '{video_id}'")));
                }
                r
            }
            SessionSource::Frames { frames } => {
                if frames.is_empty() {
                    return Err(Error::Contract("a session needs at least one frame".into()));
                }
                if let Some(&bad) = frames.iter().find(|&&i| i >= dataset.len()) {
                    return Err(Error::NotFound(format!("frame {bad}")));
                }
                frames.clone()
            }
        };
        if model.n_points() != dataset.schema.n_points {
            return Err(Error::Schema(format!(
                "model has {} landmarks, dataset {}",
                model.n_points(),
                dataset.schema.n_points
            )));
        }
        let frames = records
            .par_iter()
            .map(|&i| {
                let r = &dataset.records[i];
                let bbox = match frame_source {
                    FrameSource::GroundTruth => r.annotation.bbox,
                    FrameSource::Detection => model.refine_box(&r.image, &r.detection.unwrap_or(r.annotation.bbox))?,
                };
                let base = model.posterior(&r.image, &bbox)?;
                Ok(SessionFrame {
                    record: i,
                    frame_index: r.frame_index,
                    image: r.image.clone(),
                    bbox,
                    posterior: base.clone(),
                    base,
                    evidence: Vec::new(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            id: id.into(),
            source,
            model,
            frames,
            frame_source,
            refine,
            decoded: None,
            transitions: None,
            version: 1,
        })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_source(&self) -> FrameSource {
        self.frame_source
    }

    /// Dataset record behind session frame `t`.
    pub fn record_of(&self, t: usize) -> Result<usize> {
        Ok(self.frame(t)?.record)
    }

    fn frame(&self, t: usize) -> Result<&SessionFrame> {
        self.frames.get(t).ok_or_else(|| Error::NotFound(format!("frame {t} (session has {})", self.frames.len())))
    }

    fn check_version(&self, expected: Option<u64>) -> Result<()> {
        match expected {
            Some(e) if e != self.version => Err(Error::Conflict {
                expected: e,
                current: self.version,
            }),
            _ => Ok(()),
        }
    }

    pub fn posterior(&self, t: usize) -> Result<&PosePosterior> {
        Ok(&self.frame(t)?.posterior)
    }

    pub fn evidence(&self, t: usize) -> Result<&[Evidence]> {
        Ok(&self.frame(t)?.evidence)
    }

    /// Base posterior conditioned on the frame's evidence, recomputed.
    pub fn reconstruct_posterior(&self, t: usize) -> Result<PosePosterior> {
        let f = self.frame(t)?;
        f.evidence
            .iter()
            .try_fold(f.base.clone(), |p, e| condition(&p, &self.model.classes, e))
    }

    fn shown_class(&self, t: usize) -> (usize, bool) {
        match &self.decoded {
            Some(path) => (path[t], true),
            None => (map_class(&self.frames[t].posterior), false),
        }
    }

    pub fn prediction(&self, t: usize) -> Result<Prediction> {
        let f = self.frame(t)?;
        let (k, _) = self.shown_class(t);
        self.model.prediction_for_class(&f.image, &f.bbox, k, self.refine)
    }

    pub fn frame_payload(&self, t: usize) -> Result<FramePayload> {
        let f = self.frame(t)?;
        let pred = self.prediction(t)?;
        Ok(FramePayload {
            index: t,
            frame_index: f.frame_index,
            map_class: pred.map_class,
            landmarks: pred.landmarks,
            bbox: f.bbox,
            top_k: f
                .posterior
                .top_k(TOP_K)
                .into_iter()
                .map(|(class, prob)| TopClass { class, prob })
                .collect(),
            evidence_count: f.evidence.len(),
            decoded: self.shown_class(t).1,
        })
    }

    pub fn payloads(&self) -> Result<Vec<FramePayload>> {
        (0..self.frames.len()).into_par_iter().map(|t| self.frame_payload(t)).collect()
    }

    /// Appends a click and conditions the frame on it. Rejected evidence
    /// leaves the session untouched.
    pub fn apply_evidence(&mut self, t: usize, click: PixelEvidence, expected_version: Option<u64>, redecode: bool) -> Result<FramePayload> {
        self.check_version(expected_version)?;
        let f = self.frame(t)?;
        if !(click.x.is_finite() && click.y.is_finite()) {
            return Err(Error::Config("evidence position must be finite".into()));
        }
        let c = f.bbox.center();
        let d = f.bbox.diagonal();
        let position = Point::new((click.x - c.x) / d, (click.y - c.y) / d);
        let tolerance = click.tolerance.unwrap_or_else(|| default_tolerance(self.model.tau()));
        let ev = Evidence::new(click.landmark, position, tolerance)?;
        let updated = condition(&f.posterior, &self.model.classes, &ev)?;
        let f = &mut self.frames[t];
        f.posterior = updated;
        f.evidence.push(ev);
        self.version += 1;
        if redecode {
            let params = self.transitions.as_ref().map(|(p, _)| *p).unwrap_or_default();
            self.decode_inner(params)?;
        } else {
            self.decoded = None;
        }
        self.frame_payload(t)
    }

    fn decode_inner(&mut self, params: DecodeParams) -> Result<()> {
        let stale = self.transitions.as_ref().is_none_or(|(p, _)| *p != params);
        if stale {
            let trans = params.transitions(&self.model.classes, self.model.tau())?;
            self.transitions = Some((params, trans));
        }
        let trans = &self.transitions.as_ref().expect("just set").1;
        let seq = FrameSequence::new(
            self.frames.iter().map(|f| f.posterior.clone()).collect(),
            (0..self.frames.len()).collect(),
        )?;
        self.decoded = Some(viterbi(&seq, trans)?.classes);
        Ok(())
    }

    /// HMM decode over the current (conditioned) posteriors.
    pub fn decode(&mut self, params: DecodeParams, expected_version: Option<u64>) -> Result<Vec<FramePayload>> {
        self.check_version(expected_version)?;
        self.decode_inner(params)?;
        self.version += 1;
        self.payloads()
    }

    pub fn decoded_path(&self) -> Option<&[usize]> {
        self.decoded.as_deref()
    }

    pub fn transitions(&self) -> Option<&TransitionStructure> {
        self.transitions.as_ref().map(|(_, t)| t)
    }

    /// Marginal density of one landmark over a `res x res` pixel grid.
    pub fn heatmap(&self, t: usize, landmark: usize, res: usize) -> Result<PixelHeatmap> {
        let f = self.frame(t)?;
        let dist = mixture(&f.posterior, &self.model.classes)?;
        let grid = GridSpec::square(HEATMAP_HALF_WIDTH, res);
        let h = marginal_heatmap(&dist, landmark, grid)?;
        let c = f.bbox.center();
        let d = f.bbox.diagonal();
        Ok(PixelHeatmap {
            landmark,
            res,
            x_min: c.x + grid.x_min * d,
            x_max: c.x + grid.x_max * d,
            y_min: c.y + grid.y_min * d,
            y_max: c.y + grid.y_max * d,
            values: h.values,
        })
    }

    pub fn export_bundle(&self) -> Result<ExportBundle> {
        let mut files = Vec::with_capacity(self.frames.len());
        let mut entries = Vec::with_capacity(self.frames.len());
        for t in 0..self.frames.len() {
            let p = self.prediction(t)?;
            let f = &self.frames[t];
            let file = format!("frame_{t:05}.pts");
            files.push((file.clone(), serialize_pts(&p.landmarks)));
            entries.push(ManifestEntry {
                index: t,
                frame_index: f.frame_index,
                file,
                map_class: p.map_class,
                evidence_count: f.evidence.len(),
            });
        }
        Ok(ExportBundle {
            manifest: ExportManifest {
                session_id: self.id.clone(),
                source: self.source.clone(),
                version: self.version,
                frames: entries,
            },
            files,
        })
    }

    /// Writes the `.pts` files and `manifest.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<ExportManifest> {
        let bundle = self.export_bundle()?;
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, text) in &bundle.files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(io(&p))?;
        }
        let mp = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&bundle.manifest).map_err(|e| Error::Schema(e.to_string()))?;
        fs::write(&mp, json).map_err(io(&mp))?;
        Ok(bundle.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ExtractorKind, PatchSpec, TrainConfig};
    use crate::data::parse_pts;
    use crate::data::synth::{generate_synthetic, SyntheticConfig};
    use crate::model::{train_model, ModelConfig};

    fn setup() -> (Arc<Model>, Dataset) {
        let cfg = SyntheticConfig {
            n_examples: 60,
            n_videos: 2,
            frames_per_video: 6,
            n_landmarks: 7,
            image_size: 40,
            face_size: [18.0, 22.0],
            seed: 4,
            ..SyntheticConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let (model, _) = train_model(
            &data,
            None,
            &ModelConfig {
                k: Some(15),
                tau: 0.15,
                extractor: ExtractorKind::Random { dim: 32 },
                patch: PatchSpec { size: 12, margin: 1.25 },
                train: TrainConfig {
                    epochs: 3,
                    ..TrainConfig::default()
                },
                refine: false,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        (Arc::new(model), data)
    }

    fn video(data: &Dataset) -> SessionSource {
        SessionSource::Video {
            video_id: data.video_ids()[0].clone(),
        }
    }

    #[test]
    fn create_and_payloads() {
        let (m, d) = setup();
        let s = AnnotationSession::new("a", m.clone(), &d, video(&d), FrameSource::GroundTruth, false).unwrap();
        assert_eq!(s.version(), 1);
        assert_eq!(s.len(), 6);
        let batch = m.predict_dataset(&d, FrameSource::GroundTruth, false).unwrap();
        for t in 0..s.len() {
            let p = s.frame_payload(t).unwrap();
            let (bp, _) = &batch[s.record_of(t).unwrap()];
            assert_eq!(p.map_class, bp.map_class);
            assert_eq!(p.landmarks, bp.landmarks);
            assert_eq!(p.top_k.len(), TOP_K);
        }
        let one = AnnotationSession::new("b", m.clone(), &d, SessionSource::Frames { frames: vec![3] }, FrameSource::GroundTruth, false).unwrap();
        assert_eq!(one.len(), 1);
        let missing = SessionSource::Video { video_id: "nope".into() };
        assert!(matches!(
            AnnotationSession::new("c", m, &d, missing, FrameSource::GroundTruth, false),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn evidence_flow() {
        let (m, d) = setup();
        let mut s = AnnotationSession::new("a", m.clone(), &d, video(&d), FrameSource::GroundTruth, false).unwrap();
        let other = AnnotationSession::new("b", m.clone(), &d, video(&d), FrameSource::GroundTruth, false).unwrap();
        let t = 2;
        let before = s.frame_payload(t).unwrap();
        // a click far from any class mean is rejected without side effects
        let bad = PixelEvidence {
            landmark: 0,
            x: -500.0,
            y: -500.0,
            tolerance: None,
        };
        assert!(matches!(s.apply_evidence(t, bad, Some(1), false), Err(Error::NoConsistentClass)));
        assert_eq!(s.version(), 1);
        // the least likely class's nose becomes the evidence
        let target = s.posterior(t).unwrap().top_k(m.k()).last().unwrap().0;
        let bbox = before.bbox;
        let nose = crate::shape::denormalize_shape(&m.classes.centers[target], &bbox).unwrap()[2];
        let click = PixelEvidence {
            landmark: 2,
            x: nose.x,
            y: nose.y,
            tolerance: Some(1e-9),
        };
        assert!(matches!(s.apply_evidence(t, click, Some(7), false), Err(Error::Conflict { expected: 7, current: 1 })));
        let after = s.apply_evidence(t, click, Some(1), false).unwrap();
        assert_eq!(s.version(), 2);
        assert_eq!(after.evidence_count, 1);
        let omega = crate::inference::consistent_classes(&m.classes, &s.evidence(t).unwrap()[0]).unwrap();
        assert!(omega.contains(&after.map_class));
        assert_eq!(&s.reconstruct_posterior(t).unwrap(), s.posterior(t).unwrap());
        // the other session is untouched
        assert_eq!(other.frame_payload(t).unwrap(), before);
        // decode keeps the pinned frame in its consistent set
        let frames = s.decode(DecodeParams::default(), Some(2)).unwrap();
        assert_eq!(s.version(), 3);
        assert!(omega.contains(&frames[t].map_class));
        let trans = s.transitions().unwrap();
        let path = s.decoded_path().unwrap();
        for w in path.windows(2) {
            assert!(trans.is_allowed(w[0], w[1]));
        }
    }

    #[test]
    fn export_matches_predictions() {
        let (m, d) = setup();
        let s = AnnotationSession::new("x", m.clone(), &d, video(&d), FrameSource::GroundTruth, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = s.export(dir.path()).unwrap();
        assert_eq!(manifest.frames.len(), s.len());
        for e in &manifest.frames {
            let text = fs::read_to_string(dir.path().join(&e.file)).unwrap();
            assert_eq!(parse_pts(&text).unwrap(), s.prediction(e.index).unwrap().landmarks);
            assert_eq!(e.evidence_count, 0);
        }
        let h = s.heatmap(0, 1, 16).unwrap();
        assert_eq!(h.values.len(), 256);
        assert!((h.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
