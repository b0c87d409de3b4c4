//! Posterior reasoning over pose classes: class probabilities, the landmark
//! mixture they induce, marginals and conditioning on a user-placed point.

use serde::{Deserialize, Serialize};

use crate::classifier::loss::log_sum_exp;
use crate::classifier::{argmax, ClassifierHead};
use crate::cluster::PoseClassSet;
use crate::error::{Error, Result};
use crate::shape::{Point, Shape};

/// Normalized class probabilities for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePosterior {
    probs: Vec<f64>,
}

impl PosePosterior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Contract("posterior entries must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("posterior sums to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn one_hot(k: usize, c: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[c] = 1.0;
        Self { probs }
    }

    /// `softmax(scores / temperature)`.
    pub fn from_scores(scores: &[f64], temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        if scores.is_empty() {
            return Err(Error::Contract("no scores".into()));
        }
        let t: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
        if t.iter().any(|v| v.is_nan()) {
            return Err(Error::Contract("scores contain NaN".into()));
        }
        let lse = log_sum_exp(&t);
        let probs: Vec<f64> = t.iter().map(|v| (v - lse).exp()).collect();
        let total: f64 = probs.iter().sum();
        Ok(Self {
            probs: probs.into_iter().map(|p| p / total).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// The `n` most probable classes, highest first; ties by index.
    pub fn top_k(&self, n: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        idx.into_iter().take(n).map(|i| (i, self.probs[i])).collect()
    }
}

pub fn posterior(head: &ClassifierHead, feature: &[f64], temperature: f64) -> Result<PosePosterior> {
    PosePosterior::from_scores(&head.scores(feature)?, temperature)
}

/// Most probable class; ties go to the lowest index.
pub fn map_class(p: &PosePosterior) -> usize {
    argmax(&p.probs)
}

fn check_k(p: &PosePosterior, classes: &PoseClassSet) -> Result<()> {
    if p.k() != classes.k() {
        return Err(Error::Schema(format!(
            "posterior over {} classes, class set has {}",
            p.k(),
            classes.k()
        )));
    }
    Ok(())
}

/// Mixture of spherical Gaussians over stacked landmark vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkDistribution {
    pub weights: Vec<f64>,
    pub means: Vec<Shape>,
    pub sigmas: Vec<f64>,
}

pub fn mixture(p: &PosePosterior, classes: &PoseClassSet) -> Result<LandmarkDistribution> {
    check_k(p, classes)?;
    Ok(LandmarkDistribution {
        weights: p.probs.clone(),
        means: classes.centers.clone(),
        sigmas: classes.bandwidths.clone(),
    })
}

fn log_gauss(d2: f64, sigma: f64, dim: usize) -> f64 {
    let v = sigma * sigma;
    -0.5 * d2 / v - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI * v).ln()
}

impl LandmarkDistribution {
    pub fn n_points(&self) -> usize {
        self.means[0].n_points()
    }

    /// Density at a full shape.
    pub fn density(&self, y: &Shape) -> Result<f64> {
        if y.n_points() != self.n_points() {
            return Err(Error::Schema("shape and mixture differ in landmark count".into()));
        }
        let dim = 2 * self.n_points();
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.sigmas)
            .filter(|((w, _), _)| **w > 0.0)
            .map(|((w, m), s)| w.ln() + log_gauss(crate::shape::flat_distance_sq(y.as_flat(), m.as_flat()), *s, dim))
            .collect();
        Ok(log_sum_exp(&terms).exp())
    }

    /// Mixture mean `sum_k p_k mu_k`.
    pub fn mean(&self) -> Shape {
        let mut acc = vec![0.0; 2 * self.n_points()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            if *w > 0.0 {
                acc.iter_mut().zip(m.as_flat()).for_each(|(a, v)| *a += w * v);
            }
        }
        Shape::from_flat(acc).expect("finite mixture mean")
    }

    /// Log density of landmark `j`'s 2-D marginal at `(x, y)`.
    fn log_marginal(&self, j: usize, x: f64, y: f64) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.sigmas)
            .filter(|((w, _), _)| **w > 0.0)
            .map(|((w, m), s)| {
                let c = m.point(j);
                w.ln() + log_gauss((x - c.x).powi(2) + (y - c.y).powi(2), *s, 2)
            })
            .collect();
        log_sum_exp(&terms)
    }
}

/// Rectangular grid of cell centers in the canonical frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn square(half_width: f64, res: usize) -> Self {
        Self {
            x_min: -half_width,
            x_max: half_width,
            y_min: -half_width,
            y_max: half_width,
            nx: res,
            ny: res,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.nx > 0
            && self.ny > 0
            && self.x_max > self.x_min
            && self.y_max > self.y_min
            && [self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::Config(format!("degenerate grid {self:?}")));
        }
        Ok(())
    }

    /// Center of cell `(i, j)`; `i` indexes x.
    pub fn cell_center(&self, i: usize, j: usize) -> Point {
        let dx = (self.x_max - self.x_min) / self.nx as f64;
        let dy = (self.y_max - self.y_min) / self.ny as f64;
        Point::new(self.x_min + (i as f64 + 0.5) * dx, self.y_min + (j as f64 + 0.5) * dy)
    }
}

/// Normalized cell masses, row-major with `ny` rows of `nx` cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.nx + i]
    }
}

/// Marginal of landmark `j` evaluated at the grid cells, normalized to sum 1.
pub fn marginal_heatmap(dist: &LandmarkDistribution, j: usize, grid: GridSpec) -> Result<Heatmap> {
    grid.validate()?;
    if j >= dist.n_points() {
        return Err(Error::IndexOutOfRange {
            index: j,
            len: dist.n_points(),
        });
    }
    let mut logs = Vec::with_capacity(grid.nx * grid.ny);
    for r in 0..grid.ny {
        for c in 0..grid.nx {
            let p = grid.cell_center(c, r);
            logs.push(dist.log_marginal(j, p.x, p.y));
        }
    }
    let lse = log_sum_exp(&logs);
    let values = logs.iter().map(|l| (l - lse).exp()).collect();
    Ok(Heatmap { grid, values })
}

/// Binned distribution of a scalar shape statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `n_bins + 1` ascending edges
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

impl Histogram {
    pub fn mean(&self) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .map(|(b, m)| m * 0.5 * (self.edges[b] + self.edges[b + 1]))
            .sum()
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let n = self.masses.len();
        let (lo, hi) = (self.edges[0], self.edges[n]);
        (((v - lo) / (hi - lo) * n as f64).floor().max(0.0) as usize).min(n - 1)
    }
}

/// Pushforward of the class posterior through `statistic` of each class
/// mean. The bin range spans the statistic over all classes.
pub fn marginal_global(
    p: &PosePosterior,
    classes: &PoseClassSet,
    statistic: impl Fn(&Shape) -> f64,
    n_bins: usize,
) -> Result<Histogram> {
    check_k(p, classes)?;
    if n_bins < 1 {
        return Err(Error::Config("n_bins must be at least 1".into()));
    }
    let values: Vec<f64> = classes.centers.iter().map(statistic).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("statistic is not finite on every class".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = 1e-9 * (1.0 + (hi - lo).abs());
    let (lo, hi) = if hi - lo > pad { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let edges: Vec<f64> = (0..=n_bins).map(|b| lo + (hi - lo) * b as f64 / n_bins as f64).collect();
    let mut hist = Histogram {
        edges,
        masses: vec![0.0; n_bins],
    };
    for (v, w) in values.iter().zip(&p.probs) {
        let b = hist.bin_of(*v);
        hist.masses[b] += w;
    }
    Ok(hist)
}

/// Left/right asymmetry of the nose within the eye segment: 0 for a
/// frontal face, positive when the nose moves toward the second eye.
pub fn yaw_proxy(shape: &Shape, left_eye: usize, right_eye: usize, nose: usize) -> f64 {
    let (l, r, n) = (shape.point(left_eye), shape.point(right_eye), shape.point(nose));
    let (ux, uy) = (r.x - l.x, r.y - l.y);
    let d2 = ux * ux + uy * uy;
    if d2 == 0.0 {
        return 0.0;
    }
    2.0 * ((n.x - l.x) * ux + (n.y - l.y) * uy) / d2 - 1.0
}

/// In-plane angle of the eye-to-eye segment, radians.
pub fn roll_proxy(shape: &Shape, left_eye: usize, right_eye: usize) -> f64 {
    let (l, r) = (shape.point(left_eye), shape.point(right_eye));
    (r.y - l.y).atan2(r.x - l.x)
}

/// A user-placed landmark position in the canonical frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub landmark: usize,
    pub position: Point,
    pub tolerance: f64,
}

impl Evidence {
    pub fn new(landmark: usize, position: Point, tolerance: f64) -> Result<Self> {
        if !(tolerance > 0.0 && tolerance.is_finite()) {
            return Err(Error::Config(format!("evidence tolerance must be positive, got {tolerance}")));
        }
        if !(position.x.is_finite() && position.y.is_finite()) {
            return Err(Error::Config("evidence position must be finite".into()));
        }
        Ok(Self {
            landmark,
            position,
            tolerance,
        })
    }
}

/// Default evidence tolerance for a membership threshold `tau`.
pub fn default_tolerance(tau: f64) -> f64 {
    0.5 * tau
}

/// Classes whose mean places the evidence landmark within tolerance.
pub fn consistent_classes(classes: &PoseClassSet, evidence: &Evidence) -> Result<Vec<usize>> {
    if evidence.landmark >= classes.n_points() {
        return Err(Error::IndexOutOfRange {
            index: evidence.landmark,
            len: classes.n_points(),
        });
    }
    Ok(classes
        .centers
        .iter()
        .enumerate()
        .filter(|(_, c)| c.point(evidence.landmark).distance(&evidence.position) <= evidence.tolerance)
        .map(|(k, _)| k)
        .collect())
}

/// Restricts the posterior to the classes consistent with the evidence.
///
/// A posterior already supported inside the consistent set is returned
/// unchanged, which makes conditioning exactly idempotent.
pub fn condition(p: &PosePosterior, classes: &PoseClassSet, evidence: &Evidence) -> Result<PosePosterior> {
    check_k(p, classes)?;
    let omega = consistent_classes(classes, evidence)?;
    if omega.is_empty() {
        return Err(Error::NoConsistentClass);
    }
    let mut inside = vec![false; p.k()];
    omega.iter().for_each(|&k| inside[k] = true);
    let outside_mass: f64 = p.probs.iter().zip(&inside).filter(|(_, i)| !**i).map(|(q, _)| q).sum();
    if outside_mass == 0.0 {
        return Ok(p.clone());
    }
    let mass: f64 = omega.iter().map(|&k| p.probs[k]).sum();
    let probs = if mass > 0.0 {
        p.probs
            .iter()
            .zip(&inside)
            .map(|(q, i)| if *i { q / mass } else { 0.0 })
            .collect()
    } else {
        // all mass fell outside: spread it over the consistent classes
        let u = 1.0 / omega.len() as f64;
        inside.iter().map(|i| if *i { u } else { 0.0 }).collect()
    };
    Ok(PosePosterior { probs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    Map,
    Expectation,
}

pub fn predict_landmarks(p: &PosePosterior, classes: &PoseClassSet, mode: PredictMode) -> Result<Shape> {
    check_k(p, classes)?;
    Ok(match mode {
        PredictMode::Map => classes.centers[map_class(p)].clone(),
        PredictMode::Expectation => mixture(p, classes)?.mean(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::SIGMA_FLOOR;
    use proptest::prelude::*;

    fn classes_1pt(xs: &[(f64, f64)], sigma: f64) -> PoseClassSet {
        PoseClassSet::new(
            xs.iter().map(|&(x, y)| Shape::from_flat(vec![x, y]).unwrap()).collect(),
            vec![sigma; xs.len()],
            false,
        )
        .unwrap()
    }

    #[test]
    fn posterior_examples() {
        let p = PosePosterior::from_scores(&[2.0; 5], 1.0).unwrap();
        assert!(p.probs().iter().all(|v| (v - 0.2).abs() < 1e-15));
        let p = PosePosterior::from_scores(&[3f64.ln(), 0.0], 1.0).unwrap();
        assert!((p.probs()[0] - 0.75).abs() < 1e-15 && (p.probs()[1] - 0.25).abs() < 1e-15);
        let p = PosePosterior::from_scores(&[0.3, 0.31, -0.2], 1e-3).unwrap();
        assert!(p.probs()[1] > 0.999);
        assert!(matches!(PosePosterior::from_scores(&[1.0], 0.0), Err(Error::Config(_))));
        assert!(matches!(PosePosterior::from_scores(&[1.0], -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn map_tie_rules() {
        assert_eq!(map_class(&PosePosterior::new(vec![0.2, 0.8]).unwrap()), 1);
        assert_eq!(map_class(&PosePosterior::new(vec![0.5, 0.5]).unwrap()), 0);
        let p = PosePosterior::new(vec![0.1, 0.4, 0.4, 0.1]).unwrap();
        assert_eq!(p.top_k(3), vec![(1, 0.4), (2, 0.4), (0, 0.1)]);
    }

    #[test]
    fn mixture_mean_example() {
        let classes = classes_1pt(&[(0.0, 0.0), (2.0, 0.0)], 0.5);
        let p = PosePosterior::new(vec![0.5, 0.5]).unwrap();
        let m = predict_landmarks(&p, &classes, PredictMode::Expectation).unwrap();
        assert_eq!(m.as_flat(), &[1.0, 0.0]);
        let one = PosePosterior::one_hot(2, 1);
        for mode in [PredictMode::Map, PredictMode::Expectation] {
            assert_eq!(predict_landmarks(&one, &classes, mode).unwrap(), classes.centers[1]);
        }
    }

    #[test]
    fn one_hot_density_is_single_gaussian() {
        let classes = classes_1pt(&[(0.0, 0.0), (1.0, 1.0)], 0.3);
        let dist = mixture(&PosePosterior::one_hot(2, 1), &classes).unwrap();
        let y = Shape::from_flat(vec![1.2, 0.9]).unwrap();
        let want = (-(0.04f64 + 0.01) / (2.0 * 0.09)).exp() / (2.0 * std::f64::consts::PI * 0.09);
        assert!((dist.density(&y).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn heatmap_rules() {
        let classes = classes_1pt(&[(-0.5, 0.0), (0.5, 0.0)], 0.1);
        let grid = GridSpec::square(1.0, 40);
        let h = marginal_heatmap(&mixture(&PosePosterior::uniform(2), &classes).unwrap(), 0, grid).unwrap();
        assert!((h.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let left: f64 = (0..40).flat_map(|j| (0..20).map(move |i| (i, j))).map(|(i, j)| h.at(i, j)).sum();
        assert!((left - 0.5).abs() < 1e-3);

        let h = marginal_heatmap(&mixture(&PosePosterior::one_hot(2, 0), &classes).unwrap(), 0, grid).unwrap();
        let peak = (0..h.values.len()).max_by(|&a, &b| h.values[a].total_cmp(&h.values[b])).unwrap();
        let c = grid.cell_center(peak % 40, peak / 40);
        assert!((c.x + 0.5).abs() <= 0.05 && c.y.abs() <= 0.05);

        let bad = GridSpec { nx: 0, ..grid };
        let dist = mixture(&PosePosterior::uniform(2), &classes).unwrap();
        assert!(matches!(marginal_heatmap(&dist, 0, bad), Err(Error::Config(_))));
        assert!(marginal_heatmap(&dist, 1, grid).is_err());
    }

    #[test]
    fn global_marginal_rules() {
        let classes = classes_1pt(&[(0.0, 0.0), (1.0, 0.0), (3.0, 0.0)], SIGMA_FLOOR);
        let stat = |s: &Shape| s.as_flat()[0];
        let h = marginal_global(&PosePosterior::one_hot(3, 1), &classes, stat, 6).unwrap();
        assert_eq!(h.masses.iter().sum::<f64>(), 1.0);
        assert_eq!(h.masses[h.bin_of(1.0)], 1.0);
        let h = marginal_global(&PosePosterior::new(vec![0.2, 0.3, 0.5]).unwrap(), &classes, stat, 4).unwrap();
        assert!((h.masses.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(marginal_global(&PosePosterior::uniform(3), &classes, stat, 0).is_err());
    }

    #[test]
    fn proxies() {
        // eyes, nose
        let frontal = Shape::from_flat(vec![-1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(yaw_proxy(&frontal, 0, 1, 2), 0.0);
        assert_eq!(roll_proxy(&frontal, 0, 1), 0.0);
        let turned = Shape::from_flat(vec![-1.0, 0.0, 1.0, 0.0, 0.5, 1.0]).unwrap();
        assert!((yaw_proxy(&turned, 0, 1, 2) - 0.5).abs() < 1e-15);
        let tilted = Shape::from_flat(vec![0.0, 0.0, 1.0, 1.0, 0.5, 0.0]).unwrap();
        assert!((roll_proxy(&tilted, 0, 1) - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn conditioning_examples() {
        let classes = classes_1pt(&[(0.0, 0.0), (1.0, 0.0)], SIGMA_FLOOR);
        let ev = Evidence::new(0, Point::new(0.0, 0.0), 0.5).unwrap();
        let p = PosePosterior::new(vec![0.2, 0.8]).unwrap();
        assert_eq!(condition(&p, &classes, &ev).unwrap().probs(), &[1.0, 0.0]);

        let classes = classes_1pt(&[(0.0, 0.0), (0.2, 0.0), (3.0, 0.0)], SIGMA_FLOOR);
        let p = PosePosterior::new(vec![0.1, 0.3, 0.6]).unwrap();
        let q = condition(&p, &classes, &ev).unwrap();
        assert!((q.probs()[0] - 0.25).abs() < 1e-15 && (q.probs()[1] - 0.75).abs() < 1e-15);
        assert_eq!(q.probs()[2], 0.0);

        let wide = Evidence::new(0, Point::new(0.0, 0.0), 10.0).unwrap();
        assert_eq!(condition(&p, &classes, &wide).unwrap(), p);

        let nowhere = Evidence::new(0, Point::new(9.0, 9.0), 0.1).unwrap();
        assert!(matches!(condition(&p, &classes, &nowhere), Err(Error::NoConsistentClass)));
        assert!(Evidence::new(0, Point::new(0.0, 0.0), 0.0).is_err());
        assert!(condition(&p, &classes, &Evidence::new(3, Point::new(0.0, 0.0), 1.0).unwrap()).is_err());
    }

    #[test]
    fn scores_at_extremes_stay_finite() {
        let p = PosePosterior::from_scores(&[1e4, -1e4, 0.0, 1e4], 1.0).unwrap();
        assert!(p.probs().iter().all(|v| v.is_finite()));
        assert_eq!(p.probs()[0], 0.5);
    }

    proptest! {
        #[test]
        fn conditioning_is_idempotent_and_lands_in_omega(
            pts in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 2..12),
            scores in prop::collection::vec(-20.0..20.0f64, 12),
            ex in -1.0..1.0f64, ey in -1.0..1.0f64, tol in 0.05..1.5f64,
        ) {
            let classes = classes_1pt(&pts, SIGMA_FLOOR);
            let p = PosePosterior::from_scores(&scores[..pts.len()], 1.0).unwrap();
            let ev = Evidence::new(0, Point::new(ex, ey), tol).unwrap();
            match condition(&p, &classes, &ev) {
                Ok(q) => {
                    let omega = consistent_classes(&classes, &ev).unwrap();
                    prop_assert!(omega.contains(&map_class(&q)));
                    prop_assert_eq!(condition(&q, &classes, &ev).unwrap(), q.clone());
                    prop_assert!((q.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                Err(e) => prop_assert!(matches!(e, Error::NoConsistentClass)),
            }
        }

        #[test]
        fn map_is_invariant_to_monotone_rescaling(
            scores in prop::collection::vec(-5.0..5.0f64, 1..10),
            a in 0.1..5.0f64, b in -3.0..3.0f64,
        ) {
            let p = PosePosterior::from_scores(&scores, 1.0).unwrap();
            let t: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            let q = PosePosterior::from_scores(&t, 1.0).unwrap();
            prop_assert_eq!(map_class(&p), argmax(&scores));
            prop_assert_eq!(map_class(&q), argmax(&t));
        }
    }
}
