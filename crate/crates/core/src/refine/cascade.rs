//! Pose-class cascaded regressors.
//!
//! Classes are grouped by clustering their means; each group owns a cascade
//! of linear maps from local appearance around the current landmarks to a
//! shape update. A group trains on every example whose membership set
//! touches one of its classes, starting from those classes' means.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ridge::ridge;
use crate::cluster::{kmeans_shapes, MembershipSets, PoseClassSet};
use crate::error::{Error, Result};
use crate::eval::metrics::canonical_error;
use crate::image::GrayImage;
use crate::shape::{flat_distance_sq, BBox, Shape};

/// Pixel samples taken around each landmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalFeatureSpec {
    /// samples per side of the square around a landmark
    pub grid: usize,
    /// half side of the square, in units of the box diagonal
    pub half_width: f64,
}

impl Default for LocalFeatureSpec {
    fn default() -> Self {
        Self {
            grid: 3,
            half_width: 0.05,
        }
    }
}

impl LocalFeatureSpec {
    pub fn len(&self, n_points: usize) -> usize {
        n_points * self.grid * self.grid
    }

    pub fn is_empty(&self) -> bool {
        self.grid == 0
    }

    /// Contrast-normalized samples around the landmarks of `shape`.
    pub fn extract(&self, image: &GrayImage, bbox: &BBox, shape: &Shape) -> Vec<f64> {
        let c = bbox.center();
        let diag = bbox.diagonal();
        let step = if self.grid > 1 {
            2.0 * self.half_width / (self.grid - 1) as f64
        } else {
            0.0
        };
        let mut out = Vec::with_capacity(self.len(shape.n_points()));
        for p in shape.points() {
            for a in 0..self.grid {
                let oy = -self.half_width + a as f64 * step;
                for b in 0..self.grid {
                    let ox = -self.half_width + b as f64 * step;
                    let (ox, oy) = if self.grid > 1 { (ox, oy) } else { (0.0, 0.0) };
                    out.push(image.sample(c.x + (p.x + ox) * diag, c.y + (p.y + oy) * diag));
                }
            }
        }
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 1e-12 { var.sqrt().recip() } else { 0.0 };
        out.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub groups: usize,
    pub levels: usize,
    /// ridge strength per training pair
    pub lambda: f64,
    /// starting shapes drawn per example from its classes in a group
    pub inits_per_example: usize,
    pub features: LocalFeatureSpec,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            groups: 100,
            levels: 7,
            lambda: 1.0,
            inits_per_example: 3,
            features: LocalFeatureSpec::default(),
            seed: 0,
        }
    }
}

impl CascadeConfig {
    fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.levels == 0 || self.inits_per_example == 0 || self.features.grid == 0 {
            return Err(Error::Config("groups, levels, inits_per_example and grid must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.features.half_width >= 0.0) {
            return Err(Error::Config("lambda and half_width must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadedRegressor {
    pub features: LocalFeatureSpec,
    /// group of every class
    pub class_group: Vec<usize>,
    /// per group, per level: `(F + 1) x 2N` maps, last row the intercept
    pub levels: Vec<Vec<DMatrix<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrainLog {
    /// mean landmark error over all training pairs before level 1 and after
    /// each level
    pub mean_error: Vec<f64>,
    /// root of the mean squared error over the same pairs
    pub rms_error: Vec<f64>,
    pub pairs: usize,
}

/// Groups classes by k-means over their means.
pub fn group_classes(classes: &PoseClassSet, groups: usize, seed: u64) -> Result<Vec<usize>> {
    let g = groups.min(classes.k());
    Ok(kmeans_shapes(&classes.centers, g, seed)?.assignments)
}

/// Examples trained by each group: those with at least one member class in
/// the group.
pub fn group_training_examples(memberships: &MembershipSets, class_group: &[usize], n_groups: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_groups];
    for (i, set) in memberships.sets.iter().enumerate() {
        let mut touched: Vec<usize> = set.iter().map(|&k| class_group[k]).collect();
        touched.sort_unstable();
        touched.dedup();
        for g in touched {
            out[g].push(i);
        }
    }
    out
}

/// Folds groups without training examples into the nearest populated group
/// and renumbers the rest densely.
fn merge_empty_groups(classes: &PoseClassSet, class_group: &mut [usize], examples: &[Vec<usize>]) -> Result<usize> {
    let populated: Vec<usize> = (0..examples.len()).filter(|&g| !examples[g].is_empty()).collect();
    if populated.is_empty() {
        return Err(Error::Contract("no group has training examples".into()));
    }
    let mut renumber = vec![usize::MAX; examples.len()];
    for (new, &g) in populated.iter().enumerate() {
        renumber[g] = new;
    }
    for k in 0..class_group.len() {
        let g = class_group[k];
        class_group[k] = if renumber[g] != usize::MAX {
            renumber[g]
        } else {
            // nearest class that sits in a populated group
            let mut best = (f64::INFINITY, 0);
            for (k2, &g2) in class_group.iter().enumerate() {
                if g2 < renumber.len() && renumber[g2] != usize::MAX {
                    let d = flat_distance_sq(classes.centers[k].as_flat(), classes.centers[k2].as_flat());
                    if d < best.0 {
                        best = (d, renumber[g2]);
                    }
                }
            }
            best.1 | (1 << 62)
        };
    }
    for g in class_group.iter_mut() {
        *g &= !(1 << 62);
    }
    Ok(populated.len())
}

/// Training images with their frames and ground-truth shapes.
pub struct RegressionData<'a> {
    pub images: Vec<&'a GrayImage>,
    pub boxes: Vec<BBox>,
    pub shapes: Vec<Shape>,
}

fn add_update(shape: &Shape, features: &[f64], w: &DMatrix<f64>) -> Shape {
    let f = features.len();
    let mut coords = shape.as_flat().to_vec();
    for (c, v) in coords.iter_mut().enumerate() {
        let col = w.column(c);
        *v += features.iter().zip(col.iter()).map(|(a, b)| a * b).sum::<f64>() + col[f];
    }
    Shape::from_flat(coords).expect("finite update")
}

struct GroupFit {
    levels: Vec<DMatrix<f64>>,
    /// per level (including the start): squared errors and plain errors
    sq: Vec<Vec<f64>>,
    err: Vec<Vec<f64>>,
}

fn fit_group(data: &RegressionData<'_>, pairs: &[(usize, usize)], classes: &PoseClassSet, cfg: &CascadeConfig) -> Result<GroupFit> {
    let n2 = 2 * classes.n_points();
    let mut current: Vec<Shape> = pairs.iter().map(|&(_, k)| classes.centers[k].clone()).collect();
    let record = |cur: &[Shape]| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut sq = Vec::with_capacity(cur.len());
        let mut err = Vec::with_capacity(cur.len());
        for (s, &(i, _)) in cur.iter().zip(pairs) {
            sq.push(flat_distance_sq(s.as_flat(), data.shapes[i].as_flat()));
            err.push(canonical_error(s, &data.shapes[i])?);
        }
        Ok((sq, err))
    };
    let (s0, e0) = record(&current)?;
    let (mut sq, mut err) = (vec![s0], vec![e0]);
    let mut levels = Vec::with_capacity(cfg.levels);
    for _ in 0..cfg.levels {
        let feats: Vec<Vec<f64>> = pairs
            .iter()
            .zip(&current)
            .map(|(&(i, _), s)| cfg.features.extract(data.images[i], &data.boxes[i], s))
            .collect();
        let f = feats[0].len();
        let x = DMatrix::from_fn(pairs.len(), f + 1, |r, c| if c < f { feats[r][c] } else { 1.0 });
        let y = DMatrix::from_fn(pairs.len(), n2, |r, c| data.shapes[pairs[r].0].as_flat()[c] - current[r].as_flat()[c]);
        let w = ridge(&x, &y, cfg.lambda * pairs.len() as f64)?;
        current = current.iter().zip(&feats).map(|(s, fe)| add_update(s, fe, &w)).collect();
        let (s, e) = record(&current)?;
        sq.push(s);
        err.push(e);
        levels.push(w);
    }
    Ok(GroupFit { levels, sq, err })
}

/// Trains the grouped cascades with example sharing.
pub fn train_pose_regressors(
    data: &RegressionData<'_>,
    classes: &PoseClassSet,
    memberships: &MembershipSets,
    cfg: &CascadeConfig,
) -> Result<(CascadedRegressor, CascadeTrainLog)> {
    cfg.validate()?;
    let m = data.shapes.len();
    if data.images.len() != m || data.boxes.len() != m || memberships.len() != m {
        return Err(Error::Schema("images, boxes, shapes and memberships must align".into()));
    }
    if memberships.inverse.len() != classes.k() {
        return Err(Error::Schema("memberships were computed for a different class set".into()));
    }
    let mut class_group = group_classes(classes, cfg.groups, cfg.seed)?;
    let n_groups = class_group.iter().max().map_or(0, |g| g + 1);
    let examples = group_training_examples(memberships, &class_group, n_groups);
    let n_groups = merge_empty_groups(classes, &mut class_group, &examples)?;
    let examples = group_training_examples(memberships, &class_group, n_groups);

    let pairs_per_group: Vec<Vec<(usize, usize)>> = examples
        .iter()
        .enumerate()
        .map(|(g, ex)| {
            let mut pairs = Vec::new();
            for &i in ex {
                let mut cands: Vec<(f64, usize)> = memberships.sets[i]
                    .iter()
                    .filter(|&&k| class_group[k] == g)
                    .map(|&k| (flat_distance_sq(classes.centers[k].as_flat(), data.shapes[i].as_flat()), k))
                    .collect();
                cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                pairs.extend(cands.into_iter().take(cfg.inits_per_example).map(|(_, k)| (i, k)));
            }
            pairs
        })
        .collect();

    let fits: Vec<GroupFit> = pairs_per_group
        .par_iter()
        .map(|pairs| fit_group(data, pairs, classes, cfg))
        .collect::<Result<_>>()?;

    let total: usize = pairs_per_group.iter().map(Vec::len).sum();
    let mut mean_error = Vec::with_capacity(cfg.levels + 1);
    let mut rms_error = Vec::with_capacity(cfg.levels + 1);
    let n2 = 2.0 * classes.n_points() as f64;
    for l in 0..=cfg.levels {
        let e: f64 = fits.iter().flat_map(|f| f.err[l].iter()).sum();
        let s: f64 = fits.iter().flat_map(|f| f.sq[l].iter()).sum();
        mean_error.push(e / total as f64);
        rms_error.push((s / (total as f64 * n2 / 2.0)).sqrt());
    }
    Ok((
        CascadedRegressor {
            features: cfg.features,
            class_group,
            levels: fits.into_iter().map(|f| f.levels).collect(),
        },
        CascadeTrainLog {
            mean_error,
            rms_error,
            pairs: total,
        },
    ))
}

impl CascadedRegressor {
    pub fn n_groups(&self) -> usize {
        self.levels.len()
    }

    /// Starts at the mean of class `k` and runs its group's cascade.
    pub fn apply(&self, classes: &PoseClassSet, image: &GrayImage, k: usize, bbox: &BBox) -> Result<Shape> {
        self.apply_from(classes.centers.get(k).ok_or(Error::IndexOutOfRange { index: k, len: classes.k() })?, image, k, bbox)
    }

    /// Runs the cascade of class `k`'s group from an arbitrary start.
    pub fn apply_from(&self, start: &Shape, image: &GrayImage, k: usize, bbox: &BBox) -> Result<Shape> {
        let g = *self.class_group.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            len: self.class_group.len(),
        })?;
        let mut s = start.clone();
        for w in &self.levels[g] {
            let f = self.features.extract(image, bbox, &s);
            if f.len() + 1 != w.nrows() || w.ncols() != 2 * s.n_points() {
                return Err(Error::Schema("cascade level does not match the shape".into()));
            }
            s = add_update(&s, &f, w);
        }
        Ok(s)
    }

    /// A cascade with every map zero.
    pub fn zeros(class_group: Vec<usize>, features: LocalFeatureSpec, n_points: usize, levels: usize) -> Self {
        let g = class_group.iter().max().map_or(1, |g| g + 1);
        let w = DMatrix::zeros(features.len(n_points) + 1, 2 * n_points);
        Self {
            features,
            class_group,
            levels: vec![vec![w; levels]; g],
        }
    }
}
