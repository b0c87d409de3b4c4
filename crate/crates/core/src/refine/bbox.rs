//! Detection-window refinement by ridge regression on image features.

use nalgebra::DMatrix;

use super::ridge::{ridge, with_intercept};
use crate::classifier::{Extractor, PatchSpec};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::shape::BBox;

/// Log-scale deltas are clamped to this magnitude when applied.
pub const LOG_SCALE_CLAMP: f64 = 1.0;

/// Offsets taking `from` to `to`: `(dx/w, dy/h, ln(w'/w), ln(h'/h))`.
pub fn bbox_deltas(from: &BBox, to: &BBox) -> [f64; 4] {
    let (a, b) = (from.center(), to.center());
    [
        (b.x - a.x) / from.w,
        (b.y - a.y) / from.h,
        (to.w / from.w).ln(),
        (to.h / from.h).ln(),
    ]
}

/// Inverse of [`bbox_deltas`], with the log terms clamped.
pub fn apply_deltas(bbox: &BBox, d: [f64; 4]) -> BBox {
    let c = bbox.center();
    let cx = c.x + d[0] * bbox.w;
    let cy = c.y + d[1] * bbox.h;
    let w = bbox.w * d[2].clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP).exp();
    let h = bbox.h * d[3].clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP).exp();
    BBox {
        x: cx - 0.5 * w,
        y: cy - 0.5 * h,
        w,
        h,
    }
}

/// Linear map from features (plus intercept) to the four deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct BBoxRegressor {
    /// `(D + 1) x 4`, last row is the intercept
    pub weights: DMatrix<f64>,
    pub lambda: f64,
}

impl BBoxRegressor {
    pub fn zeros(d: usize) -> Self {
        Self {
            weights: DMatrix::zeros(d + 1, 4),
            lambda: 0.0,
        }
    }

    pub fn predict(&self, feature: &[f64]) -> Result<[f64; 4]> {
        if feature.len() + 1 != self.weights.nrows() {
            return Err(Error::Schema("feature length differs from the box regressor".into()));
        }
        let mut out = [0.0; 4];
        for (c, o) in out.iter_mut().enumerate() {
            let col = self.weights.column(c);
            *o = feature.iter().zip(col.iter()).map(|(f, w)| f * w).sum::<f64>() + col[feature.len()];
        }
        Ok(out)
    }
}

/// Ridge fit from features extracted at `detections` to the deltas that
/// take each detection to its ground-truth box.
pub fn train_bbox_regressor(features: &DMatrix<f64>, detections: &[BBox], truths: &[BBox], lambda: f64) -> Result<BBoxRegressor> {
    let n = features.ncols();
    if detections.len() != n || truths.len() != n {
        return Err(Error::Schema("one detection and one ground-truth box per feature column".into()));
    }
    let targets = DMatrix::from_fn(n, 4, |i, c| bbox_deltas(&detections[i], &truths[i])[c]);
    let weights = ridge(&with_intercept(&features.transpose()), &targets, lambda)?;
    Ok(BBoxRegressor { weights, lambda })
}

/// One-shot refinement of a detection window.
pub fn refine_bbox(reg: &BBoxRegressor, extractor: &Extractor, spec: &PatchSpec, image: &GrayImage, bbox: &BBox) -> Result<BBox> {
    bbox.validate()?;
    let f = extractor.extract_one(&spec.extract(image, bbox))?;
    Ok(apply_deltas(bbox, reg.predict(&f)?))
}
