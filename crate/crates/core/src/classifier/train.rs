//! Mini-batch SGD with momentum for the head, optionally backpropagating
//! into a trainable extractor.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::extractor::{Extractor, Mlp};
use super::loss::{loss_and_grad, LossKind};
use super::ClassifierHead;
use crate::cluster::MembershipSets;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// multiplicative learning-rate decay applied after every epoch
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub train_bias: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::MultiLabel,
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.2,
            lr_decay: 0.92,
            momentum: 0.9,
            weight_decay: 0.0,
            train_bias: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// mean per-example loss
    pub loss: f64,
    /// fraction of examples whose top class lies outside their membership set
    pub multi_label_error: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: ClassifierHead,
    pub log: Vec<EpochLog>,
}

struct Momentum {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

impl Momentum {
    fn zeros(r: usize, c: usize) -> Self {
        Self {
            w: DMatrix::zeros(r, c),
            b: DVector::zeros(r),
        }
    }

    /// `v <- mu v - lr g; x <- x + v`
    fn step(&mut self, w: &mut DMatrix<f64>, gw: &DMatrix<f64>, b: Option<(&mut DVector<f64>, &DVector<f64>)>, mu: f64, lr: f64) {
        self.w.zip_apply(gw, |v, g| *v = mu * *v - lr * g);
        *w += &self.w;
        if let Some((b, gb)) = b {
            self.b.zip_apply(gb, |v, g| *v = mu * *v - lr * g);
            *b += &self.b;
        }
    }
}

/// Trains the head on fixed features (one column per example).
pub fn train_head(features: &DMatrix<f64>, memberships: &MembershipSets, k: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(features, None, memberships, k, cfg)
}

/// Trains the head jointly with a hidden layer on raw patches.
pub fn train_joint(patches: &DMatrix<f64>, mlp: &mut Mlp, memberships: &MembershipSets, k: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(patches, Some(mlp), memberships, k, cfg)
}

/// Trains a head for `extractor` on `patches`; trainable extractors are
/// updated in place.
pub fn train(patches: &DMatrix<f64>, extractor: &mut Extractor, memberships: &MembershipSets, k: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    match extractor {
        Extractor::Mlp(mlp) => train_joint(patches, mlp, memberships, k, cfg),
        other => {
            let features = other.forward(patches)?;
            train_head(&features, memberships, k, cfg)
        }
    }
}

fn run(inputs: &DMatrix<f64>, mut mlp: Option<&mut Mlp>, memberships: &MembershipSets, k: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m = inputs.ncols();
    if m == 0 {
        return Err(Error::Config("no training examples".into()));
    }
    if memberships.len() != m {
        return Err(Error::Schema(format!("{m} examples but {} membership sets", memberships.len())));
    }
    if memberships.inverse.len() != k {
        return Err(Error::Schema(format!(
            "membership sets cover {} classes, head has {k}",
            memberships.inverse.len()
        )));
    }
    let d = match &mlp {
        Some(mlp) => {
            if mlp.weights.ncols() != inputs.nrows() {
                return Err(Error::Schema("patch length differs from extractor input".into()));
            }
            mlp.weights.nrows()
        }
        None => inputs.nrows(),
    };

    let mut head = ClassifierHead::zeros(k, d);
    let mut head_v = Momentum::zeros(k, d);
    let mut mlp_v = mlp.as_ref().map(|x| Momentum::zeros(x.weights.nrows(), x.weights.ncols()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut lr = cfg.learning_rate;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total_loss, mut errors) = (0.0, 0usize);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = inputs.select_columns(idx);
            let tape = mlp.as_ref().map(|net| net.forward_tape(&x));
            let f = tape.as_ref().map_or(&x, |(f, _)| f);
            let s = head.scores_batch(f);

            let per: Vec<(f64, Vec<f64>, bool)> = idx
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let col = s.column(j);
                    let sc = col.as_slice();
                    let (l, g) = loss_and_grad(cfg.loss, sc, memberships.nearest[i], &memberships.sets[i])?;
                    let top = argmax(sc);
                    Ok((l, g, !memberships.contains(i, top)))
                })
                .collect::<Result<_>>()?;
            let bsz = idx.len() as f64;
            let mut g = DMatrix::zeros(k, idx.len());
            for (j, (l, gj, wrong)) in per.into_iter().enumerate() {
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch, batch });
                }
                total_loss += l;
                errors += usize::from(wrong);
                g.column_mut(j).copy_from_slice(&gj);
            }
            g /= bsz;

            let mut gw = &g * f.transpose();
            if cfg.weight_decay > 0.0 {
                gw += &head.weights * cfg.weight_decay;
            }
            if let (Some(net), Some((_, t)), Some(v)) = (mlp.as_deref_mut(), tape.as_ref(), mlp_v.as_mut()) {
                let upstream = head.weights.transpose() * &g;
                let (dw, db) = net.backward(t, &x, &upstream);
                v.step(&mut net.weights, &dw, Some((&mut net.bias, &db)), cfg.momentum, lr);
            }
            let gb = g.column_sum();
            let bias = cfg.train_bias.then_some((&mut head.bias, &gb));
            head_v.step(&mut head.weights, &gw, bias, cfg.momentum, lr);
            if head.weights.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { epoch, batch });
            }
        }
        log.push(EpochLog {
            epoch,
            learning_rate: lr,
            loss: total_loss / m as f64,
            multi_label_error: errors as f64 / m as f64,
        });
        lr *= cfg.lr_decay;
    }
    Ok(TrainOutcome { head, log })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(s: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = i;
        }
    }
    best
}
