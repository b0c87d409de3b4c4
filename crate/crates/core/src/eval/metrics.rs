//! Normalized landmark error and cumulative error distributions.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::shape::{shape_distance, Point, RawAnnotation, Shape};

/// Failure threshold on the normalized error.
pub const FAILURE_THRESHOLD: f64 = 0.08;

/// RMS landmark distance divided by the ground-truth box diagonal.
pub fn pt_pt_error(pred: &[Point], gt: &RawAnnotation) -> Result<f64> {
    if pred.len() != gt.points.len() || pred.is_empty() {
        return Err(Error::Schema(format!(
            "prediction has {} landmarks, ground truth {}",
            pred.len(),
            gt.points.len()
        )));
    }
    let ms = pred
        .iter()
        .zip(&gt.points)
        .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(ms.sqrt() / gt.bbox.diagonal())
}

/// The same error for two canonical-frame shapes normalized by the same box.
pub fn canonical_error(pred: &Shape, gt: &Shape) -> Result<f64> {
    Ok(shape_distance(pred, gt)? / (gt.n_points() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CedCurve {
    pub thresholds: Vec<f64>,
    /// fraction of errors at or below each threshold
    pub cumulative: Vec<f64>,
    /// mean cumulative fraction over the threshold grid, in `[0, 1]`
    pub auc: f64,
    /// percentage of errors above the failure threshold
    pub failure_rate: f64,
}

/// Number of grid steps used for the AUC.
pub const CED_STEPS: usize = 1000;

pub fn ced_stats(errors: &[f64], threshold: f64) -> Result<CedCurve> {
    if errors.is_empty() {
        return Err(Error::Contract("no errors to summarize".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::Config("threshold must be positive".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let frac_le = |t: f64| sorted.partition_point(|&e| e <= t) as f64 / n;
    let thresholds: Vec<f64> = (0..=CED_STEPS).map(|i| threshold * i as f64 / CED_STEPS as f64).collect();
    let cumulative: Vec<f64> = thresholds.iter().map(|&t| frac_le(t)).collect();
    let auc = cumulative.iter().sum::<f64>() / cumulative.len() as f64;
    let failure_rate = 100.0 * (1.0 - frac_le(threshold));
    Ok(CedCurve {
        thresholds,
        cumulative,
        auc,
        failure_rate,
    })
}

/// Failure rate in percent.
pub fn failure_rate(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    100.0 * errors.iter().filter(|&&e| e > FAILURE_THRESHOLD).count() as f64 / errors.len() as f64
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Indices of the `ceil(fraction * M)` frames whose normalized shapes lie
/// farthest from `mean_shape`, farthest first; ties by index.
pub fn hard_subset_indices(dataset: &Dataset, mean_shape: &Shape, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let shapes = dataset.shapes()?;
    let d = shapes
        .iter()
        .map(|s| shape_distance(s, mean_shape))
        .collect::<Result<Vec<_>>>()?;
    let mut idx: Vec<usize> = (0..shapes.len()).collect();
    idx.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let take = (fraction * shapes.len() as f64).ceil() as usize;
    idx.truncate(take.min(shapes.len()));
    Ok(idx)
}

pub fn hard_subset(dataset: &Dataset, mean_shape: &Shape, fraction: f64) -> Result<Dataset> {
    Ok(dataset.subset(&hard_subset_indices(dataset, mean_shape, fraction)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SyntheticConfig};
    use crate::shape::BBox;
    use proptest::prelude::*;

    fn ann(points: Vec<Point>, w: f64, h: f64) -> RawAnnotation {
        RawAnnotation {
            points,
            bbox: BBox::new(0.0, 0.0, w, h).unwrap(),
            image_ref: String::new(),
        }
    }

    #[test]
    fn pt_pt_examples() {
        let gt = ann(vec![Point::new(1.0, 1.0)], 3.0, 4.0);
        assert_eq!(pt_pt_error(&gt.points, &gt).unwrap(), 0.0);
        assert!((pt_pt_error(&[Point::new(4.0, 5.0)], &gt).unwrap() - 1.0).abs() < 1e-15);
        let gt = ann(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)], 6.0, 8.0);
        let e = pt_pt_error(&[Point::new(0.0, 0.0), Point::new(6.0, 0.0)], &gt).unwrap();
        assert!((e - 12.5f64.sqrt() / 10.0).abs() < 1e-15);
        assert!(pt_pt_error(&[], &gt).is_err());
    }

    #[test]
    fn ced_examples() {
        let c = ced_stats(&[0.0; 5], FAILURE_THRESHOLD).unwrap();
        assert_eq!((c.auc, c.failure_rate), (1.0, 0.0));
        let c = ced_stats(&[0.09, 0.5], FAILURE_THRESHOLD).unwrap();
        assert_eq!((c.auc, c.failure_rate), (0.0, 100.0));
        let c = ced_stats(&[0.05, 0.09, 0.07, 0.10], FAILURE_THRESHOLD).unwrap();
        assert_eq!(c.failure_rate, 50.0);
        assert_eq!(failure_rate(&[0.05, 0.09, 0.07, 0.10]), 50.0);
        assert!(c.cumulative.windows(2).all(|w| w[0] <= w[1]));
        // uniform errors on [0, 0.08]: AUC near 1/2
        let u: Vec<f64> = (0..10_000).map(|i| 0.08 * (i as f64 + 0.5) / 10_000.0).collect();
        assert!((ced_stats(&u, FAILURE_THRESHOLD).unwrap().auc - 0.5).abs() < 2e-3);
        assert!(ced_stats(&[], FAILURE_THRESHOLD).is_err());
    }

    fn synthetic(n: usize) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n_examples: n,
            image_size: 32,
            face_size: [14.0, 16.0],
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn hard_subset_rules() {
        let d = synthetic(20);
        let shapes = d.shapes().unwrap();
        let m = Shape::mean(&shapes).unwrap();
        assert_eq!(hard_subset_indices(&d, &m, 1.0).unwrap().len(), 20);
        let two = hard_subset_indices(&d, &m, 0.1).unwrap();
        assert_eq!(two.len(), 2);
        let mut dist: Vec<(f64, usize)> = shapes.iter().enumerate().map(|(i, s)| (shape_distance(s, &m).unwrap(), i)).collect();
        dist.sort_by(|a, b| b.0.total_cmp(&a.0));
        assert_eq!(two, vec![dist[0].1, dist[1].1]);
        assert!(hard_subset_indices(&d, &m, 0.0).is_err());
    }

    #[test]
    fn hard_subset_prefers_large_yaw() {
        let d = synthetic(300);
        let m = Shape::mean(&d.shapes().unwrap()).unwrap();
        let yaw = |ds: &Dataset| mean(&ds.records.iter().map(|r| r.meta.unwrap().params.yaw.abs()).collect::<Vec<_>>());
        assert!(yaw(&hard_subset(&d, &m, 0.1).unwrap()) > yaw(&d));
    }

    proptest! {
        #[test]
        fn ced_is_permutation_invariant(mut errs in prop::collection::vec(0.0..0.2f64, 1..50), seed in 0u64..100) {
            let a = ced_stats(&errs, FAILURE_THRESHOLD).unwrap();
            let n = errs.len();
            errs.rotate_left((seed as usize) % n);
            errs.reverse();
            prop_assert_eq!(a, ced_stats(&errs, FAILURE_THRESHOLD).unwrap());
        }

        #[test]
        fn hard_subset_is_nested(f1 in 0.01..1.0f64, f2 in 0.01..1.0f64) {
            let d = synthetic(30);
            let m = Shape::mean(&d.shapes().unwrap()).unwrap();
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let a = hard_subset_indices(&d, &m, lo).unwrap();
            let b = hard_subset_indices(&d, &m, hi).unwrap();
            prop_assert!(a.iter().all(|i| b.contains(i)));
        }
    }
}
