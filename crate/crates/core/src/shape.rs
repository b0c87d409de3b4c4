//! Landmark-shape geometry.
//!
//! A [`Shape`] lives in the canonical frame: landmarks relative to the center
//! of their detection window, divided by the window diagonal. The same
//! diagonal is the normalizer of the evaluation error, so a canonical-frame
//! distance and a normalized pixel error share units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned box, top-left corner plus extent, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Tight box around a point set.
    pub fn enclosing(points: &[Point]) -> Result<Self> {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidAnnotation(format!(
                "bounding box must be finite with positive extent, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    /// Same center, each side multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> BBox {
        let c = self.center();
        let (w, h) = (self.w * factor, self.h * factor);
        BBox {
            x: c.x - 0.5 * w,
            y: c.y - 0.5 * h,
            w,
            h,
        }
    }

    /// Horizontal mirror inside an image of width `image_width`.
    pub fn mirrored(&self, image_width: f64) -> BBox {
        BBox {
            x: image_width - self.x - self.w,
            ..*self
        }
    }
}

/// Landmarks in image pixels together with their ground-truth window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub points: Vec<Point>,
    pub bbox: BBox,
    pub image_ref: String,
}

/// N landmarks in the canonical frame.
///
/// Coordinates are stored interleaved (`x0, y0, x1, y1, ...`), which is also
/// the stacked 2N-vector used for distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    coords: Vec<f64>,
}

impl Shape {
    pub fn from_points(points: &[Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidAnnotation("shape needs at least one landmark".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidAnnotation(format!("landmark {i} is not finite")));
        }
        Ok(Self {
            coords: points.iter().flat_map(|p| [p.x, p.y]).collect(),
        })
    }

    /// Builds a shape from a stacked `[x0, y0, x1, y1, ...]` vector.
    pub fn from_flat(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || coords.len() % 2 != 0 {
            return Err(Error::Schema(format!(
                "stacked shape vector must have even nonzero length, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidAnnotation("non-finite coordinate".into()));
        }
        Ok(Self { coords })
    }

    pub fn zeros(n_points: usize) -> Self {
        Self {
            coords: vec![0.0; 2 * n_points.max(1)],
        }
    }

    pub fn n_points(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> Point {
        Point::new(self.coords[2 * i], self.coords[2 * i + 1])
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.coords.chunks_exact(2).map(|c| Point::new(c[0], c[1]))
    }

    /// Coordinate-wise mean of a nonempty set of shapes.
    pub fn mean<'a>(shapes: impl IntoIterator<Item = &'a Shape>) -> Result<Shape> {
        let mut acc: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for s in shapes {
            match acc.as_mut() {
                None => acc = Some(s.coords.clone()),
                Some(a) => {
                    if a.len() != s.coords.len() {
                        return Err(Error::Schema("shapes differ in landmark count".into()));
                    }
                    a.iter_mut().zip(&s.coords).for_each(|(a, b)| *a += b);
                }
            }
            count += 1;
        }
        let mut acc = acc.ok_or_else(|| Error::Contract("mean of an empty shape set".into()))?;
        acc.iter_mut().for_each(|v| *v /= count as f64);
        Ok(Shape { coords: acc })
    }
}

/// Index permutation pairing left and right landmarks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FlipPermutation {
    perm: Vec<usize>,
}

impl FlipPermutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        if let Some((i, &j)) = perm.iter().enumerate().find(|(_, &j)| j >= n) {
            return Err(Error::Config(format!("flip permutation maps {i} to {j}, out of range")));
        }
        for (i, &j) in perm.iter().enumerate() {
            if perm[j] != i {
                return Err(Error::Config(format!(
                    "flip permutation is not an involution: {i} -> {j} -> {}",
                    perm[j]
                )));
            }
        }
        Ok(Self { perm })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    /// Reorders `items` so that `out[i] = items[perm[i]]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.perm.iter().map(|&j| items[j].clone()).collect()
    }
}

impl TryFrom<Vec<usize>> for FlipPermutation {
    type Error = Error;

    fn try_from(perm: Vec<usize>) -> Result<Self> {
        Self::new(perm)
    }
}

impl From<FlipPermutation> for Vec<usize> {
    fn from(p: FlipPermutation) -> Self {
        p.perm
    }
}

/// Maps pixel landmarks into the canonical frame of their window:
/// `p' = (p - center) / diagonal`.
pub fn normalize_shape(raw: &RawAnnotation) -> Result<Shape> {
    normalize_points(&raw.points, &raw.bbox)
}

/// [`normalize_shape`] for an arbitrary window.
pub fn normalize_points(points: &[Point], bbox: &BBox) -> Result<Shape> {
    bbox.validate()?;
    if let Some(i) = points.iter().position(|p| !p.is_finite()) {
        return Err(Error::InvalidAnnotation(format!("landmark {i} is not finite")));
    }
    let c = bbox.center();
    let d = bbox.diagonal();
    let pts: Vec<Point> = points
        .iter()
        .map(|p| Point::new((p.x - c.x) / d, (p.y - c.y) / d))
        .collect();
    Shape::from_points(&pts)
}

/// Inverse of [`normalize_points`] for the same window.
pub fn denormalize_shape(shape: &Shape, bbox: &BBox) -> Result<Vec<Point>> {
    bbox.validate()?;
    let c = bbox.center();
    let d = bbox.diagonal();
    Ok(shape
        .points()
        .map(|p| Point::new(p.x * d + c.x, p.y * d + c.y))
        .collect())
}

/// Euclidean norm of the stacked 2N difference vector.
pub fn shape_distance(a: &Shape, b: &Shape) -> Result<f64> {
    if a.n_points() != b.n_points() {
        return Err(Error::Schema(format!(
            "landmark count mismatch: {} vs {}",
            a.n_points(),
            b.n_points()
        )));
    }
    Ok(flat_distance_sq(a.as_flat(), b.as_flat()).sqrt())
}

#[inline]
pub(crate) fn flat_distance_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mirrors about x = 0 and swaps left/right landmark identities.
pub fn flip_shape(shape: &Shape, perm: &FlipPermutation) -> Result<Shape> {
    if perm.len() != shape.n_points() {
        return Err(Error::Config(format!(
            "flip permutation has length {}, shape has {} landmarks",
            perm.len(),
            shape.n_points()
        )));
    }
    let mirrored: Vec<Point> = shape.points().map(|p| Point::new(-p.x, p.y)).collect();
    Shape::from_points(&perm.apply(&mirrored))
}
