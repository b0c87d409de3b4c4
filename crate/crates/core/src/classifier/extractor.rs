//! Image feature extractors.
//!
//! Every extractor reads the same input: a fixed-size, contrast-normalized
//! patch resampled from the detection window.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::shape::BBox;

/// How the input patch is cut from an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    /// side length of the resampled patch, pixels
    pub size: usize,
    /// window enlargement around the bounding box
    pub margin: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { size: 24, margin: 1.25 }
    }
}

impl PatchSpec {
    pub fn len(&self) -> usize {
        self.size * self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Resampled window with zero mean and unit variance.
    pub fn extract(&self, image: &GrayImage, bbox: &BBox) -> Vec<f64> {
        let mut p = image.crop_resample(&bbox.scaled(self.margin), self.size);
        let n = p.len() as f64;
        let mean = p.iter().sum::<f64>() / n;
        let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 1e-12 { var.sqrt().recip() } else { 0.0 };
        p.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        p
    }

    /// Patches of many windows, one column each.
    pub fn extract_all(&self, items: &[(&GrayImage, BBox)]) -> DMatrix<f64> {
        let cols: Vec<Vec<f64>> = items.par_iter().map(|(img, b)| self.extract(img, b)).collect();
        let mut m = DMatrix::zeros(self.len(), cols.len());
        for (j, c) in cols.iter().enumerate() {
            m.column_mut(j).copy_from_slice(c);
        }
        m
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    // column-major fill keeps the stream layout fixed
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Fixed random projection followed by a ReLU, rescaled so that feature
/// entries have unit RMS on the data it was fitted to.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeatures {
    pub projection: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub scale: f64,
}

impl RandomFeatures {
    pub fn new(input_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = gaussian_matrix(dim, input_dim, (input_dim as f64).sqrt().recip(), &mut rng);
        let offset = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        Self {
            projection,
            offset,
            scale: 1.0,
        }
    }

    pub fn forward(&self, patches: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = &self.projection * patches;
        for mut col in h.column_iter_mut() {
            col += &self.offset;
            col.apply(|v| *v = relu(*v) * self.scale);
        }
        h
    }

    /// Sets `scale` so the features of `patches` have unit RMS.
    pub fn fit_scale(&mut self, patches: &DMatrix<f64>) {
        self.scale = 1.0;
        let h = self.forward(patches);
        let ms = h.norm_squared() / h.len().max(1) as f64;
        self.scale = if ms > 0.0 { ms.sqrt().recip() } else { 1.0 };
    }
}

/// One trainable hidden layer, `relu(W p + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Cached activations of an [`Mlp`] forward pass.
pub struct MlpTape {
    pre: DMatrix<f64>,
}

impl Mlp {
    pub fn new(input_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = gaussian_matrix(dim, input_dim, (2.0 / input_dim as f64).sqrt(), &mut rng);
        let bias = DVector::from_fn(dim, |_, _| rng.random_range(-0.5..0.5));
        Self { weights, bias }
    }

    pub fn forward(&self, patches: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_tape(patches).0
    }

    pub fn forward_tape(&self, patches: &DMatrix<f64>) -> (DMatrix<f64>, MlpTape) {
        let mut pre = &self.weights * patches;
        for mut col in pre.column_iter_mut() {
            col += &self.bias;
        }
        let out = pre.map(relu);
        (out, MlpTape { pre })
    }

    /// Gradients of the layer parameters given the upstream gradient with
    /// respect to its output, both averaged over the batch by the caller.
    pub fn backward(
        &self,
        tape: &MlpTape,
        patches: &DMatrix<f64>,
        upstream: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let mut d = upstream.clone();
        d.zip_apply(&tape.pre, |g, p| {
            if p <= 0.0 {
                *g = 0.0
            }
        });
        let dw = &d * patches.transpose();
        let db = d.column_sum();
        (dw, db)
    }
}

/// Stack of tanh layers with configurable depth, used to put a known amount
/// of computation in front of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepFeatures {
    pub input: DMatrix<f64>,
    /// one hidden-to-hidden matrix applied `depth` times
    pub hidden: DMatrix<f64>,
    pub depth: usize,
}

impl DeepFeatures {
    pub fn new(input_dim: usize, dim: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = gaussian_matrix(dim, input_dim, (input_dim as f64).sqrt().recip(), &mut rng);
        let hidden = gaussian_matrix(dim, dim, (dim as f64).sqrt().recip(), &mut rng);
        Self { input, hidden, depth }
    }

    pub fn forward(&self, patches: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = (&self.input * patches).map(f64::tanh);
        for _ in 0..self.depth {
            h = (&self.hidden * &h).map(f64::tanh);
        }
        h
    }
}

/// A feature extractor with a fixed output dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    Random(RandomFeatures),
    Mlp(Mlp),
    Deep(DeepFeatures),
}

/// Extractor family and size, as written in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ExtractorKind {
    Random { dim: usize },
    Mlp { dim: usize },
    Deep { dim: usize, depth: usize },
}

impl Default for ExtractorKind {
    fn default() -> Self {
        ExtractorKind::Random { dim: 768 }
    }
}

impl Extractor {
    pub fn new(kind: ExtractorKind, input_dim: usize, seed: u64) -> Result<Self> {
        let dim = match kind {
            ExtractorKind::Random { dim } | ExtractorKind::Mlp { dim } | ExtractorKind::Deep { dim, .. } => dim,
        };
        if dim == 0 || input_dim == 0 {
            return Err(Error::Config("extractor dimensions must be positive".into()));
        }
        Ok(match kind {
            ExtractorKind::Random { dim } => Extractor::Random(RandomFeatures::new(input_dim, dim, seed)),
            ExtractorKind::Mlp { dim } => Extractor::Mlp(Mlp::new(input_dim, dim, seed)),
            ExtractorKind::Deep { dim, depth } => Extractor::Deep(DeepFeatures::new(input_dim, dim, depth, seed)),
        })
    }

    pub fn kind(&self) -> ExtractorKind {
        match self {
            Extractor::Random(r) => ExtractorKind::Random { dim: r.projection.nrows() },
            Extractor::Mlp(m) => ExtractorKind::Mlp { dim: m.weights.nrows() },
            Extractor::Deep(d) => ExtractorKind::Deep {
                dim: d.input.nrows(),
                depth: d.depth,
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Extractor::Random(r) => r.projection.nrows(),
            Extractor::Mlp(m) => m.weights.nrows(),
            Extractor::Deep(d) => d.input.nrows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Extractor::Random(r) => r.projection.ncols(),
            Extractor::Mlp(m) => m.weights.ncols(),
            Extractor::Deep(d) => d.input.ncols(),
        }
    }

    pub fn trainable(&self) -> bool {
        matches!(self, Extractor::Mlp(_))
    }

    /// Multiply-adds per example, counted as two FLOPs each.
    pub fn flops(&self) -> usize {
        let (d, p) = (self.dim(), self.input_dim());
        match self {
            Extractor::Random(_) | Extractor::Mlp(_) => 2 * d * p,
            Extractor::Deep(x) => 2 * d * p + 2 * x.depth * d * d,
        }
    }

    /// Features of a batch of patches, one column each.
    pub fn forward(&self, patches: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if patches.nrows() != self.input_dim() {
            return Err(Error::Schema(format!(
                "extractor expects {}-dim patches, got {}",
                self.input_dim(),
                patches.nrows()
            )));
        }
        Ok(match self {
            Extractor::Random(r) => r.forward(patches),
            Extractor::Mlp(m) => m.forward(patches),
            Extractor::Deep(d) => d.forward(patches),
        })
    }

    pub fn extract_one(&self, patch: &[f64]) -> Result<Vec<f64>> {
        let m = DMatrix::from_column_slice(patch.len(), 1, patch);
        Ok(self.forward(&m)?.as_slice().to_vec())
    }

    /// Adapts data-dependent normalization to the training patches.
    pub fn fit(&mut self, patches: &DMatrix<f64>) {
        if let Extractor::Random(r) = self {
            r.fit_scale(patches);
        }
    }

    /// Named parameter tensors `(name, rows, cols, values)`, column-major.
    pub fn tensors(&self) -> Vec<(&'static str, usize, usize, Vec<f64>)> {
        let t = |name, m: &DMatrix<f64>| (name, m.nrows(), m.ncols(), m.as_slice().to_vec());
        let v = |name, x: &DVector<f64>| (name, x.len(), 1, x.as_slice().to_vec());
        match self {
            Extractor::Random(r) => vec![
                t("projection", &r.projection),
                v("offset", &r.offset),
                ("scale", 1, 1, vec![r.scale]),
            ],
            Extractor::Mlp(m) => vec![t("weights", &m.weights), v("bias", &m.bias)],
            Extractor::Deep(d) => vec![t("input", &d.input), t("hidden", &d.hidden)],
        }
    }

    /// Inverse of [`Extractor::tensors`].
    pub fn from_tensors(kind: ExtractorKind, mut tensors: Vec<(String, usize, usize, Vec<f64>)>) -> Result<Self> {
        let mut take = |name: &str| -> Result<DMatrix<f64>> {
            let pos = tensors
                .iter()
                .position(|t| t.0 == name)
                .ok_or_else(|| Error::Schema(format!("extractor tensor '{name}' missing")))?;
            let (_, r, c, data) = tensors.swap_remove(pos);
            if data.len() != r * c {
                return Err(Error::Schema(format!("extractor tensor '{name}' has wrong length")));
            }
            Ok(DMatrix::from_vec(r, c, data))
        };
        let e = match kind {
            ExtractorKind::Random { .. } => Extractor::Random(RandomFeatures {
                projection: take("projection")?,
                offset: take("offset")?.column(0).into_owned(),
                scale: take("scale")?[(0, 0)],
            }),
            ExtractorKind::Mlp { .. } => Extractor::Mlp(Mlp {
                weights: take("weights")?,
                bias: take("bias")?.column(0).into_owned(),
            }),
            ExtractorKind::Deep { depth, .. } => Extractor::Deep(DeepFeatures {
                input: take("input")?,
                hidden: take("hidden")?,
                depth,
            }),
        };
        if e.kind() != kind {
            return Err(Error::Schema("extractor tensors disagree with the declared kind".into()));
        }
        Ok(e)
    }
}
