//! Staged evaluation of a trained model: classification alone, with the
//! cascade, and with temporal decoding plus smoothing on videos.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{ced_stats, hard_subset_indices, mean, pt_pt_error, FAILURE_THRESHOLD};
use crate::data::Dataset;
use crate::error::Result;
use crate::inference::{map_class, PosePosterior};
use crate::model::{FrameSource, Model};
use crate::shape::{Point, Shape};
use crate::temporal::{lowpass_smooth, viterbi, DecodeParams, FrameSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub frame: FrameSource,
    pub decode: DecodeParams,
    pub window: usize,
    /// share of frames farthest from the mean shape kept as the hard subset
    pub hard_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frame: FrameSource::GroundTruth,
            decode: DecodeParams::default(),
            window: 3,
            hard_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageScores {
    pub frames: usize,
    pub mean_error: f64,
    pub auc: f64,
    /// percent of frames above the failure threshold
    pub failure_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRow {
    pub stage: String,
    pub all: StageScores,
    pub hard: StageScores,
}

fn scores(errors: &[f64]) -> Result<StageScores> {
    let c = ced_stats(errors, FAILURE_THRESHOLD)?;
    Ok(StageScores {
        frames: errors.len(),
        mean_error: mean(errors),
        auc: c.auc,
        failure_rate: c.failure_rate,
    })
}

/// Per-frame pixel landmarks of the three stages.
pub struct StagePredictions {
    pub classification: Vec<Vec<Point>>,
    pub regressor: Vec<Vec<Point>>,
    pub temporal: Vec<Vec<Point>>,
}

/// Runs every stage. Records outside videos keep their regressor output
/// in the temporal stage.
pub fn pipeline_predictions(model: &Model, dataset: &Dataset, cfg: &PipelineConfig) -> Result<StagePredictions> {
    let base = model.predict_dataset(dataset, cfg.frame, false)?;
    let classification: Vec<Vec<Point>> = base.iter().map(|(p, _)| p.landmarks.clone()).collect();
    let regressor: Vec<Vec<Point>> = base
        .par_iter()
        .zip(&dataset.records)
        .map(|((p, _), r)| Ok(model.prediction_for_class(&r.image, &p.bbox, p.map_class, true)?.landmarks))
        .collect::<Result<_>>()?;
    let mut temporal = regressor.clone();
    let videos = dataset.video_ids();
    if !videos.is_empty() {
        let trans = cfg.decode.transitions(&model.classes, model.tau())?;
        let per_video: Vec<(Vec<usize>, Vec<Vec<Point>>)> = videos
            .par_iter()
            .map(|v| {
                let idx = dataset.video_frames(v);
                let posts: Vec<PosePosterior> = idx.iter().map(|&i| base[i].1.clone()).collect();
                let frames = idx.iter().map(|&i| dataset.records[i].frame_index.unwrap_or(i)).collect();
                let path = viterbi(&FrameSequence::new(posts, frames)?, &trans)?.classes;
                // smooth in pixels, carried through a shape container
                let shapes = idx
                    .iter()
                    .zip(&path)
                    .map(|(&i, &k)| {
                        let r = &dataset.records[i];
                        let pts = model.prediction_for_class(&r.image, &base[i].0.bbox, k, true)?.landmarks;
                        Shape::from_points(&pts)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let smooth = lowpass_smooth(&shapes, cfg.window)?;
                Ok((idx, smooth.iter().map(|s| s.points().collect()).collect()))
            })
            .collect::<Result<_>>()?;
        for (idx, pts) in per_video {
            for (i, p) in idx.into_iter().zip(pts) {
                temporal[i] = p;
            }
        }
    }
    Ok(StagePredictions {
        classification,
        regressor,
        temporal,
    })
}

/// Mean error, AUC and failure rate per stage, on all frames and on the
/// hard subset.
pub fn pipeline_eval(model: &Model, dataset: &Dataset, cfg: &PipelineConfig) -> Result<Vec<PipelineRow>> {
    let preds = pipeline_predictions(model, dataset, cfg)?;
    let hard = hard_subset_indices(dataset, &model.mean_shape, cfg.hard_fraction)?;
    let mut rows = Vec::with_capacity(3);
    for (stage, pts) in [
        ("classification", &preds.classification),
        ("+regressor", &preds.regressor),
        ("+temporal", &preds.temporal),
    ] {
        let errors: Vec<f64> = pts
            .iter()
            .zip(&dataset.records)
            .map(|(p, r)| pt_pt_error(p, &r.annotation))
            .collect::<Result<_>>()?;
        let hard_errors: Vec<f64> = hard.iter().map(|&i| errors[i]).collect();
        rows.push(PipelineRow {
            stage: stage.into(),
            all: scores(&errors)?,
            hard: scores(&hard_errors)?,
        });
    }
    Ok(rows)
}

pub fn pipeline_table(rows: &[PipelineRow]) -> String {
    let mut out = String::from("stage\tmean_error\tauc\tfailure_rate\thard_mean_error\thard_auc\thard_failure_rate\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.4}\t{:.3}\t{:.6}\t{:.4}\t{:.3}\n",
            r.stage, r.all.mean_error, r.all.auc, r.all.failure_rate, r.hard.mean_error, r.hard.auc, r.hard.failure_rate
        ));
    }
    out
}

/// MAP class per record index.
pub fn map_summary(model: &Model, dataset: &Dataset, frame: FrameSource) -> Result<BTreeMap<usize, usize>> {
    Ok(model
        .predict_dataset(dataset, frame, false)?
        .iter()
        .enumerate()
        .map(|(i, (_, p))| (i, map_class(p)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ExtractorKind, PatchSpec, TrainConfig};
    use crate::data::synth::{generate_synthetic, SyntheticConfig};
    use crate::model::{train_model, ModelConfig};
    use crate::refine::CascadeConfig;

    #[test]
    fn stages_on_videos_and_stills() {
        let data = generate_synthetic(&SyntheticConfig {
            n_examples: 30,
            n_videos: 2,
            frames_per_video: 8,
            n_landmarks: 7,
            image_size: 40,
            face_size: [18.0, 22.0],
            seed: 8,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let (model, _) = train_model(
            &data,
            None,
            &ModelConfig {
                k: Some(10),
                extractor: ExtractorKind::Random { dim: 32 },
                patch: PatchSpec { size: 12, margin: 1.25 },
                train: TrainConfig {
                    epochs: 2,
                    ..TrainConfig::default()
                },
                cascade: CascadeConfig {
                    groups: 2,
                    levels: 2,
                    ..CascadeConfig::default()
                },
                ..ModelConfig::default()
            },
        )
        .unwrap();
        let cfg = PipelineConfig::default();
        let preds = pipeline_predictions(&model, &data, &cfg).unwrap();
        // stills keep the regressor output
        let still = (0..data.len()).find(|&i| data.records[i].video_id.is_none()).unwrap();
        assert_eq!(preds.temporal[still], preds.regressor[still]);
        let rows = pipeline_eval(&model, &data, &cfg).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].hard.frames, (0.1 * data.len() as f64).ceil() as usize);
        assert!(pipeline_table(&rows).lines().count() == 4);
    }
}
