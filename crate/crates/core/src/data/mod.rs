//! Dataset ingestion, synthetic generation, splitting and augmentation.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! schema.json       landmark count, flip permutation, named landmark indices
//! manifest.jsonl    one JSON object per record
//! images/*.png      8-bit grayscale rasters
//! pts/*.pts         IBUG landmark files
//! ```

pub mod pts;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use pts::{parse_pts, serialize_pts};
pub use synth::{generate_synthetic, FaceParams, FaceTemplate, SyntheticConfig, SyntheticMeta};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::shape::{normalize_shape, BBox, FlipPermutation, Point, RawAnnotation, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub n_points: usize,
    pub flip: FlipPermutation,
    /// landmark used for one-click conditioning
    pub nose_index: usize,
    pub left_eye_index: usize,
    pub right_eye_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image: GrayImage,
    pub annotation: RawAnnotation,
    /// detector output around the ground truth, when available
    pub detection: Option<BBox>,
    pub video_id: Option<String>,
    pub frame_index: Option<usize>,
    pub meta: Option<SyntheticMeta>,
}

impl DatasetRecord {
    pub fn shape(&self) -> Result<Shape> {
        normalize_shape(&self.annotation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub schema: DatasetSchema,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Canonical-frame shapes of every record.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        self.records.iter().map(DatasetRecord::shape).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            schema: self.schema.clone(),
        }
    }

    /// Video ids in order of first appearance.
    pub fn video_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter_map(|r| r.video_id.as_ref())
            .filter(|v| seen.insert(v.as_str()))
            .cloned()
            .collect()
    }

    /// Record indices of one video, ordered by frame index.
    pub fn video_frames(&self, video_id: &str) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.records.len())
            .filter(|&i| self.records[i].video_id.as_deref() == Some(video_id))
            .collect();
        idx.sort_by_key(|&i| (self.records[i].frame_index, i));
        idx
    }

    fn check_schema(&self) -> Result<()> {
        let n = self.schema.n_points;
        if self.schema.flip.len() != n {
            return Err(Error::Schema(format!(
                "flip permutation covers {} landmarks, schema has {n}",
                self.schema.flip.len()
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.annotation.points.len() != n {
                return Err(Error::Schema(format!(
                    "record {i} has {} landmarks, schema has {n}",
                    r.annotation.points.len()
                )));
            }
        }
        Ok(())
    }
}

/// Splits whole videos into a validation set and subsamples training videos
/// at a uniform frame stride. Records outside any video all go to training.
pub fn split_and_subsample(
    dataset: &Dataset,
    val_fraction: f64,
    frame_stride: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction must be in (0, 1), got {val_fraction}")));
    }
    if frame_stride == 0 {
        return Err(Error::Config("frame_stride must be at least 1".into()));
    }
    let mut videos = dataset.video_ids();
    if videos.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 videos to hold out whole videos, found {}",
            videos.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    videos.shuffle(&mut rng);
    let n_val = ((val_fraction * videos.len() as f64).round() as usize).clamp(1, videos.len() - 1);
    let val_videos: HashSet<&str> = videos[..n_val].iter().map(String::as_str).collect();

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, r) in dataset.records.iter().enumerate() {
        if r.video_id.is_none() {
            train.push(i);
        }
    }
    for v in dataset.video_ids() {
        let frames = dataset.video_frames(&v);
        if val_videos.contains(v.as_str()) {
            val.extend(frames);
        } else {
            train.extend(frames.into_iter().step_by(frame_stride));
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

/// Mirror of one record: image, landmarks (with left/right identities
/// swapped), windows and generator parameters.
pub fn flip_record(r: &DatasetRecord, perm: &FlipPermutation) -> DatasetRecord {
    let w = r.image.width() as f64;
    let mirrored: Vec<Point> = r
        .annotation
        .points
        .iter()
        .map(|p| Point::new(w - p.x, p.y))
        .collect();
    DatasetRecord {
        image: r.image.mirrored(),
        annotation: RawAnnotation {
            points: perm.apply(&mirrored),
            bbox: r.annotation.bbox.mirrored(w),
            image_ref: format!("{}#flip", r.annotation.image_ref),
        },
        detection: r.detection.map(|b| b.mirrored(w)),
        video_id: r.video_id.as_ref().map(|v| format!("{v}-flip")),
        frame_index: r.frame_index,
        meta: r.meta.map(|m| SyntheticMeta {
            params: m.params.mirrored(),
            occluded: m.occluded,
        }),
    }
}

/// Appends the left-right mirror of every record.
pub fn flip_augment(dataset: &Dataset) -> Dataset {
    let mut records = dataset.records.clone();
    records.extend(dataset.records.iter().map(|r| flip_record(r, &dataset.schema.flip)));
    Dataset {
        records,
        schema: dataset.schema.clone(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    image: String,
    pts: String,
    bbox: [f64; 4],
    image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    detection: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    video_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<SyntheticMeta>,
}

fn bbox_array(b: &BBox) -> [f64; 4] {
    [b.x, b.y, b.w, b.h]
}

fn array_bbox(a: [f64; 4]) -> Result<BBox> {
    BBox::new(a[0], a[1], a[2], a[3])
}

/// Writes the dataset directory layout described in the module docs.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.check_schema()?;
    for sub in ["images", "pts"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let schema_path = dir.join("schema.json");
    let schema = serde_json::to_string_pretty(&dataset.schema).expect("schema serializes");
    fs::write(&schema_path, schema + "\n").map_err(|e| Error::io(&schema_path, e))?;

    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = BufWriter::new(file);
    for (i, r) in dataset.records.iter().enumerate() {
        let image = format!("images/{i:06}.png");
        let pts = format!("pts/{i:06}.pts");
        r.image.save_png(&dir.join(&image))?;
        let pts_path = dir.join(&pts);
        fs::write(&pts_path, serialize_pts(&r.annotation.points)).map_err(|e| Error::io(&pts_path, e))?;
        let line = ManifestLine {
            image,
            pts,
            bbox: bbox_array(&r.annotation.bbox),
            image_ref: r.annotation.image_ref.clone(),
            detection: r.detection.as_ref().map(bbox_array),
            video_id: r.video_id.clone(),
            frame_index: r.frame_index,
            meta: r.meta,
        };
        let json = serde_json::to_string(&line).expect("manifest line serializes");
        writeln!(out, "{json}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let schema_path = dir.join("schema.json");
    let text = fs::read_to_string(&schema_path).map_err(|e| Error::io(&schema_path, e))?;
    let schema: DatasetSchema =
        serde_json::from_str(&text).map_err(|e| Error::format(&schema_path, e.to_string()))?;

    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(&manifest_path, format!("line {}: {e}", lineno + 1)))?;
        let pts_path = dir.join(&m.pts);
        let pts_text = fs::read_to_string(&pts_path).map_err(|e| Error::io(&pts_path, e))?;
        let points = parse_pts(&pts_text).map_err(|e| Error::format(&pts_path, e.to_string()))?;
        records.push(DatasetRecord {
            image: GrayImage::load_png(&dir.join(&m.image))?,
            annotation: RawAnnotation {
                points,
                bbox: array_bbox(m.bbox)?,
                image_ref: m.image_ref,
            },
            detection: m.detection.map(array_bbox).transpose()?,
            video_id: m.video_id,
            frame_index: m.frame_index,
            meta: m.meta,
        });
    }
    let dataset = Dataset { records, schema };
    dataset.check_schema()?;
    Ok(dataset)
}

/// Per-video record counts, for reporting.
pub fn video_summary(dataset: &Dataset) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in &dataset.records {
        if let Some(v) = &r.video_id {
            *out.entry(v.clone()).or_insert(0) += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::flip_shape;

    fn video_dataset(n_videos: usize, frames: usize) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n_examples: 3,
            n_videos,
            frames_per_video: frames,
            image_size: 48,
            face_size: [20.0, 24.0],
            seed: 5,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn uniform_stride_on_training_videos() {
        let d = video_dataset(4, 100);
        let (train, val) = split_and_subsample(&d, 0.25, 10, 1).unwrap();
        let val_ids: HashSet<_> = val.records.iter().filter_map(|r| r.video_id.clone()).collect();
        assert_eq!(val_ids.len(), 1);
        assert_eq!(val.len(), 100);
        for v in train.video_ids() {
            let frames: Vec<_> = train
                .records
                .iter()
                .filter(|r| r.video_id.as_ref() == Some(&v))
                .map(|r| r.frame_index.unwrap())
                .collect();
            assert_eq!(frames, (0..100).step_by(10).collect::<Vec<_>>());
            assert!(!val_ids.contains(&v));
        }
        // stills are always training data
        assert_eq!(train.records.iter().filter(|r| r.video_id.is_none()).count(), 3);
    }

    #[test]
    fn split_is_deterministic() {
        let d = video_dataset(6, 4);
        let a = split_and_subsample(&d, 0.3, 2, 17).unwrap();
        let b = split_and_subsample(&d, 0.3, 2, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_requires_two_videos() {
        let d = video_dataset(1, 4);
        assert!(matches!(split_and_subsample(&d, 0.5, 1, 0), Err(Error::Split(_))));
        assert!(matches!(split_and_subsample(&d, 1.5, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn flip_doubles_and_mirrors() {
        let d = video_dataset(1, 3);
        let f = flip_augment(&d);
        assert_eq!(f.len(), 2 * d.len());
        let w = d.records[0].image.width() as f64;
        for (orig, flipped) in d.records.iter().zip(&f.records[d.len()..]) {
            let b = orig.annotation.bbox;
            assert_eq!(flipped.annotation.bbox, BBox { x: w - b.x - b.w, ..b });
            let s = flip_shape(&orig.shape().unwrap(), &d.schema.flip).unwrap();
            let t = flipped.shape().unwrap();
            for (u, v) in s.as_flat().iter().zip(t.as_flat()) {
                assert!((u - v).abs() < 1e-12);
            }
            assert!(flipped.annotation.points.iter().all(|p| p.x >= 0.0 && p.x <= w));
        }
        // flipping twice recovers the originals exactly
        let ff = flip_augment(&f);
        for (orig, back) in d.records.iter().zip(&ff.records[3 * d.len()..]) {
            assert_eq!(orig.image, back.image);
            for (p, q) in orig.annotation.points.iter().zip(&back.annotation.points) {
                assert!(p.distance(q) < 1e-12);
            }
        }
    }

    #[test]
    fn flip_count_matches_reference_training_size() {
        let img = GrayImage::new(2, 2, vec![0; 4]).unwrap();
        let record = DatasetRecord {
            image: img,
            annotation: RawAnnotation {
                points: vec![Point::new(0.5, 0.5), Point::new(1.5, 1.5)],
                bbox: BBox::new(0.5, 0.5, 1.0, 1.0).unwrap(),
                image_ref: "r".into(),
            },
            detection: None,
            video_id: None,
            frame_index: None,
            meta: None,
        };
        let d = Dataset {
            records: vec![record; 70_214],
            schema: DatasetSchema {
                n_points: 2,
                flip: FlipPermutation::new(vec![1, 0]).unwrap(),
                nose_index: 0,
                left_eye_index: 0,
                right_eye_index: 1,
            },
        };
        assert_eq!(flip_augment(&d).len(), 140_428);
    }

    #[test]
    fn save_load_round_trip() {
        let d = video_dataset(2, 3);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn load_missing_directory_names_path() {
        let e = load_dataset(Path::new("/nonexistent/posekit-data")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/posekit-data"));
    }
}
