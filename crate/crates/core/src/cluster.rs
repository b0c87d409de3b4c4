//! The discrete output vocabulary: pose classes, their kernel bandwidths and
//! the overlapping membership sets that drive example sharing.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shape::{flat_distance_sq, Shape};

/// Lower bound on per-class bandwidths, canonical units.
pub const SIGMA_FLOOR: f64 = 0.01;

pub const KMEANS_TOL: f64 = 1e-6;
pub const KMEANS_MAX_ITER: usize = 200;

/// K pose classes: centers with spherical kernel bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseClassSet {
    pub centers: Vec<Shape>,
    pub bandwidths: Vec<f64>,
    /// every training example is its own class
    pub exemplar: bool,
}

impl PoseClassSet {
    pub fn new(centers: Vec<Shape>, bandwidths: Vec<f64>, exemplar: bool) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Config("a pose class set needs at least one class".into()));
        }
        if centers.len() != bandwidths.len() {
            return Err(Error::Schema(format!(
                "{} centers but {} bandwidths",
                centers.len(),
                bandwidths.len()
            )));
        }
        let n = centers[0].n_points();
        if centers.iter().any(|c| c.n_points() != n) {
            return Err(Error::Schema("pose class centers differ in landmark count".into()));
        }
        if let Some(s) = bandwidths.iter().find(|s| !(s.is_finite() && **s >= SIGMA_FLOOR)) {
            return Err(Error::Config(format!("bandwidth {s} is below the floor {SIGMA_FLOOR}")));
        }
        Ok(Self {
            centers,
            bandwidths,
            exemplar,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn n_points(&self) -> usize {
        self.centers[0].n_points()
    }

    /// Index of the closest center; ties go to the lowest index.
    pub fn nearest(&self, shape: &Shape) -> usize {
        nearest_center(shape.as_flat(), &self.centers).0
    }
}

/// Output of Lloyd's algorithm.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centers: Vec<Shape>,
    pub assignments: Vec<usize>,
    /// within-cluster SSE after each assignment step
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

fn nearest_center(x: &[f64], centers: &[Shape]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = flat_distance_sq(x, c.as_flat());
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign(shapes: &[Shape], centers: &[Shape]) -> (Vec<usize>, Vec<f64>) {
    shapes
        .par_iter()
        .map(|s| nearest_center(s.as_flat(), centers))
        .unzip()
}

fn kmeans_pp(shapes: &[Shape], k: usize, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let m = shapes.len();
    let mut chosen = vec![false; m];
    let first = rng.random_range(0..m);
    chosen[first] = true;
    let mut centers = vec![shapes[first].clone()];
    let mut d2: Vec<f64> = shapes
        .iter()
        .map(|s| flat_distance_sq(s.as_flat(), shapes[first].as_flat()))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // all remaining points coincide with a center
            chosen.iter().position(|c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = shapes[pick].clone();
        for (d, s) in d2.iter_mut().zip(shapes) {
            *d = d.min(flat_distance_sq(s.as_flat(), c.as_flat()));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding over stacked shape vectors.
///
/// `k == shapes.len()` is the exemplar bypass: the centers are the inputs,
/// in order, and no iterations run.
pub fn kmeans_shapes(shapes: &[Shape], k: usize, seed: u64) -> Result<KMeansResult> {
    let m = shapes.len();
    if k == 0 || k > m {
        return Err(Error::Config(format!("k must be in 1..={m}, got {k}")));
    }
    let n = shapes[0].n_points();
    if shapes.iter().any(|s| s.n_points() != n) {
        return Err(Error::Schema("shapes differ in landmark count".into()));
    }
    if k == m {
        return Ok(KMeansResult {
            centers: shapes.to_vec(),
            assignments: (0..m).collect(),
            sse_history: vec![0.0],
            iterations: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp(shapes, k, &mut rng);
    let dim = 2 * n;
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    loop {
        let (assignments, d2) = assign(shapes, &centers);
        sse_history.push(d2.iter().sum());
        if iterations == KMEANS_MAX_ITER {
            return Ok(KMeansResult {
                centers,
                assignments,
                sse_history,
                iterations,
            });
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (s, &a) in shapes.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(s.as_flat()).for_each(|(acc, v)| *acc += v);
        }
        // empty clusters move to the points worst served by their center
        let mut spread = d2.clone();
        let mut new_centers = Vec::with_capacity(k);
        for (c, (sum, count)) in sums.into_iter().zip(counts).enumerate() {
            if count > 0 {
                let mean = sum.into_iter().map(|v| v / count as f64).collect();
                new_centers.push(Shape::from_flat(mean)?);
            } else {
                let far = (0..m)
                    .max_by(|&a, &b| spread[a].total_cmp(&spread[b]).then(b.cmp(&a)))
                    .expect("nonempty input");
                spread[far] = f64::NEG_INFINITY;
                new_centers.push(shapes[far].clone());
                let _ = c;
            }
        }
        let movement = centers
            .iter()
            .zip(&new_centers)
            .map(|(a, b)| flat_distance_sq(a.as_flat(), b.as_flat()).sqrt())
            .fold(0.0, f64::max);
        centers = new_centers;
        if movement < KMEANS_TOL {
            let (assignments, d2) = assign(shapes, &centers);
            sse_history.push(d2.iter().sum());
            return Ok(KMeansResult {
                centers,
                assignments,
                sse_history,
                iterations,
            });
        }
    }
}

/// RMS member distance per class, floored at `floor`.
pub fn fit_bandwidths(centers: &[Shape], shapes: &[Shape], assignments: &[usize], floor: f64) -> Vec<f64> {
    let mut sq = vec![0.0; centers.len()];
    let mut counts = vec![0usize; centers.len()];
    for (s, &a) in shapes.iter().zip(assignments) {
        sq[a] += flat_distance_sq(s.as_flat(), centers[a].as_flat());
        counts[a] += 1;
    }
    sq.iter()
        .zip(&counts)
        .map(|(&s, &c)| {
            if c == 0 {
                floor
            } else {
                (s / c as f64).sqrt().max(floor)
            }
        })
        .collect()
}

/// Clusters `shapes` into `k` classes and fits their bandwidths.
pub fn build_pose_classes(shapes: &[Shape], k: usize, seed: u64) -> Result<(PoseClassSet, KMeansResult)> {
    let km = kmeans_shapes(shapes, k, seed)?;
    let bandwidths = fit_bandwidths(&km.centers, shapes, &km.assignments, SIGMA_FLOOR);
    let classes = PoseClassSet::new(km.centers.clone(), bandwidths, k == shapes.len())?;
    Ok((classes, km))
}

/// Per-example sets of classes within `tau`, plus the inverse lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipSets {
    /// sorted class indices per example
    pub sets: Vec<Vec<usize>>,
    pub tau: f64,
    /// sorted example indices per class
    pub inverse: Vec<Vec<usize>>,
    /// closest class per example
    pub nearest: Vec<usize>,
}

impl MembershipSets {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn contains(&self, example: usize, class: usize) -> bool {
        self.sets[example].binary_search(&class).is_ok()
    }
}

/// Classes within `tau` of each shape; the nearest class is always included,
/// so no set is empty.
pub fn membership_sets(classes: &PoseClassSet, shapes: &[Shape], tau: f64) -> Result<MembershipSets> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be finite and >= 0, got {tau}")));
    }
    let n = classes.n_points();
    if shapes.iter().any(|s| s.n_points() != n) {
        return Err(Error::Schema("shapes and pose classes differ in landmark count".into()));
    }
    let per_example: Vec<(Vec<usize>, usize)> = shapes
        .par_iter()
        .map(|s| {
            let mut set = Vec::new();
            let mut best = (0usize, f64::INFINITY);
            for (k, c) in classes.centers.iter().enumerate() {
                let d2 = flat_distance_sq(s.as_flat(), c.as_flat());
                if d2.sqrt() <= tau {
                    set.push(k);
                }
                if d2 < best.1 {
                    best = (k, d2);
                }
            }
            if let Err(pos) = set.binary_search(&best.0) {
                set.insert(pos, best.0);
            }
            (set, best.0)
        })
        .collect();
    let mut inverse = vec![Vec::new(); classes.k()];
    for (i, (set, _)) in per_example.iter().enumerate() {
        for &k in set {
            inverse[k].push(i);
        }
    }
    let (sets, nearest) = per_example.into_iter().unzip();
    Ok(MembershipSets {
        sets,
        tau,
        inverse,
        nearest,
    })
}

/// Number of examples per membership-set size.
pub fn membership_histogram(memberships: &MembershipSets) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for s in &memberships.sets {
        *h.entry(s.len()).or_insert(0) += 1;
    }
    h
}
