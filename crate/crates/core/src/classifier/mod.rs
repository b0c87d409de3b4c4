//! The K-way linear head, its losses and training, and nearest-neighbor
//! classification over embeddings.

pub mod extractor;
pub mod loss;
pub mod train;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use extractor::{Extractor, ExtractorKind, PatchSpec};
pub use loss::LossKind;
pub use train::{argmax, train, train_head, EpochLog, TrainConfig, TrainOutcome};

/// Linear scores `W f + b` with one row of `W` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl ClassifierHead {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            weights: DMatrix::zeros(k, d),
            bias: DVector::zeros(k),
        }
    }

    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if bias.len() != weights.nrows() {
            return Err(Error::Schema(format!(
                "bias has {} entries for {} classes",
                bias.len(),
                weights.nrows()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Schema("head parameters must be finite".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn k(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Number of scalars held by the head.
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn scores(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.dim() {
            return Err(Error::Schema(format!(
                "feature has {} entries, head expects {}",
                feature.len(),
                self.dim()
            )));
        }
        let f = DVector::from_column_slice(feature);
        Ok((&self.weights * f + &self.bias).as_slice().to_vec())
    }

    /// Scores of a feature batch, one column per example.
    pub fn scores_batch(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut s = &self.weights * features;
        if self.bias.iter().any(|&b| b != 0.0) {
            for mut col in s.column_iter_mut() {
                col += &self.bias;
            }
        }
        s
    }
}

/// What to embed: a class (its weight row) or an input patch (its features).
#[derive(Debug, Clone, Copy)]
pub enum EmbedItem<'a> {
    Class(usize),
    Patch(&'a [f64]),
}

pub fn embed(head: &ClassifierHead, extractor: &Extractor, item: EmbedItem<'_>) -> Result<Vec<f64>> {
    match item {
        EmbedItem::Class(k) => {
            if k >= head.k() {
                return Err(Error::IndexOutOfRange { index: k, len: head.k() });
            }
            Ok(head.weights.row(k).iter().copied().collect())
        }
        EmbedItem::Patch(p) => extractor.extract_one(p),
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Schema(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Index of the bank vector with the highest cosine similarity to `query`;
/// ties go to the lowest index.
pub fn nn_classify(bank: &[Vec<f64>], query: &[f64]) -> Result<usize> {
    if bank.is_empty() {
        return Err(Error::Contract("nearest-neighbor bank is empty".into()));
    }
    let sims = bank.iter().map(|b| cosine(b, query)).collect::<Result<Vec<_>>>()?;
    Ok(argmax(&sims))
}

/// Unit-normalized bank rows for repeated cosine queries.
#[derive(Debug, Clone)]
pub struct CosineBank {
    rows: DMatrix<f64>,
}

impl CosineBank {
    /// Bank from the rows of `m`.
    pub fn from_rows(m: &DMatrix<f64>) -> Result<Self> {
        let mut rows = m.clone();
        for mut r in rows.row_iter_mut() {
            let n = r.norm();
            if n == 0.0 {
                return Err(Error::ZeroVector);
            }
            r /= n;
        }
        Ok(Self { rows })
    }

    /// Nearest bank row for each query column.
    pub fn classify(&self, queries: &DMatrix<f64>) -> Result<Vec<usize>> {
        if queries.nrows() != self.rows.ncols() {
            return Err(Error::Schema("query dimension differs from bank".into()));
        }
        let sims = &self.rows * queries;
        sims.column_iter()
            .zip(queries.column_iter())
            .map(|(s, q)| {
                if q.norm() == 0.0 {
                    Err(Error::ZeroVector)
                } else {
                    Ok(argmax(s.as_slice()))
                }
            })
            .collect()
    }
}
