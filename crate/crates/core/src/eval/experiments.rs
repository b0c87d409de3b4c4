//! Experiment drivers: loss versus class count, head scaling, and
//! interactive conditioning.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{canonical_error, failure_rate, mean};
use crate::classifier::{argmax, train_head, ClassifierHead, Extractor, ExtractorKind, LossKind, PatchSpec, TrainConfig};
use crate::cluster::{build_pose_classes, membership_sets, PoseClassSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{condition, default_tolerance, map_class, Evidence, PosePosterior};
use crate::shape::Shape;

/// Patches cut at the ground-truth boxes plus the matching shapes.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub patches: DMatrix<f64>,
    pub shapes: Vec<Shape>,
}

pub fn prepare(dataset: &Dataset, spec: &PatchSpec) -> Result<Prepared> {
    let items: Vec<_> = dataset.records.iter().map(|r| (&r.image, r.annotation.bbox)).collect();
    Ok(Prepared {
        patches: spec.extract_all(&items),
        shapes: dataset.shapes()?,
    })
}

/// Landmark error of each column's top-scoring class mean.
pub fn map_errors(scores: &DMatrix<f64>, classes: &PoseClassSet, shapes: &[Shape]) -> Result<Vec<f64>> {
    scores
        .column_iter()
        .zip(shapes)
        .map(|(s, gt)| canonical_error(&classes.centers[argmax(s.as_slice())], gt))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossScalingConfig {
    pub k_grid: Vec<usize>,
    pub losses: Vec<LossKind>,
    pub tau: f64,
    pub patch: PatchSpec,
    pub extractor: ExtractorKind,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for LossScalingConfig {
    fn default() -> Self {
        Self {
            k_grid: vec![10, 100, 1000],
            losses: LossKind::ALL.to_vec(),
            tau: 0.1,
            patch: PatchSpec::default(),
            extractor: ExtractorKind::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossScalingRow {
    pub k: usize,
    pub loss: LossKind,
    pub train_landmark_error: f64,
    pub val_landmark_error: f64,
    pub train_multi_label_error: f64,
    pub val_multi_label_error: f64,
    /// fraction of validation examples whose top class is not their nearest
    pub val_exact_class_error: f64,
}

struct Cell {
    classes: PoseClassSet,
    train_mem: crate::cluster::MembershipSets,
    val_mem: crate::cluster::MembershipSets,
}

/// Trains every `(K, loss)` cell and reports landmark and multi-label errors.
/// A K equal to the training-set size uses the exemplar classes.
pub fn loss_scaling_experiment(train: &Dataset, val: &Dataset, cfg: &LossScalingConfig) -> Result<Vec<LossScalingRow>> {
    let tr = prepare(train, &cfg.patch)?;
    let va = prepare(val, &cfg.patch)?;
    let m = tr.shapes.len();
    if let Some(&k) = cfg.k_grid.iter().find(|&&k| k == 0 || k > m) {
        return Err(Error::Config(format!("K={k} outside 1..={m}")));
    }
    let mut extractor = Extractor::new(cfg.extractor, cfg.patch.len(), cfg.seed)?;
    extractor.fit(&tr.patches);
    let ftr = extractor.forward(&tr.patches)?;
    let fva = extractor.forward(&va.patches)?;

    let cells: Vec<Cell> = cfg
        .k_grid
        .iter()
        .map(|&k| {
            let (classes, _) = build_pose_classes(&tr.shapes, k, cfg.seed)?;
            let train_mem = membership_sets(&classes, &tr.shapes, cfg.tau)?;
            let val_mem = membership_sets(&classes, &va.shapes, cfg.tau)?;
            Ok(Cell {
                classes,
                train_mem,
                val_mem,
            })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, LossKind)> = (0..cells.len())
        .flat_map(|c| cfg.losses.iter().map(move |&l| (c, l)))
        .collect();
    jobs.par_iter()
        .map(|&(c, loss)| {
            let cell = &cells[c];
            let tc = TrainConfig {
                loss,
                ..cfg.train.clone()
            };
            let head = train_head(&ftr, &cell.train_mem, cell.classes.k(), &tc)?.head;
            let eval = |f: &DMatrix<f64>, shapes: &[Shape], mem: &crate::cluster::MembershipSets| -> Result<(f64, f64, f64)> {
                let s = head.scores_batch(f);
                let errs = map_errors(&s, &cell.classes, shapes)?;
                let (mut ml, mut exact) = (0usize, 0usize);
                for (i, col) in s.column_iter().enumerate() {
                    let top = argmax(col.as_slice());
                    ml += usize::from(!mem.contains(i, top));
                    exact += usize::from(top != mem.nearest[i]);
                }
                let n = shapes.len() as f64;
                Ok((mean(&errs), ml as f64 / n, exact as f64 / n))
            };
            let (tle, tml, _) = eval(&ftr, &tr.shapes, &cell.train_mem)?;
            let (vle, vml, vex) = eval(&fva, &va.shapes, &cell.val_mem)?;
            Ok(LossScalingRow {
                k: cell.classes.k(),
                loss,
                train_landmark_error: tle,
                val_landmark_error: vle,
                train_multi_label_error: tml,
                val_multi_label_error: vml,
                val_exact_class_error: vex,
            })
        })
        .collect()
}

/// Tab-separated rendering of a result table.
pub fn loss_scaling_table(rows: &[LossScalingRow]) -> String {
    let mut out = String::from("k\tloss\ttrain_landmark_error\tval_landmark_error\ttrain_multi_label_error\tval_multi_label_error\tval_exact_class_error\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\n",
            r.k,
            r.loss.name(),
            r.train_landmark_error,
            r.val_landmark_error,
            r.train_multi_label_error,
            r.val_multi_label_error,
            r.val_exact_class_error
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScalingRow {
    pub k: usize,
    pub param_count: usize,
    pub memory_bytes: usize,
    pub extractor_flops: usize,
    pub head_flops: usize,
    /// median seconds per forward pass of extractor plus head
    pub median_total_s: f64,
    pub median_head_s: f64,
    pub head_share: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times one forward pass (extractor then head) for each K; memory is the
/// exact head parameter count.
pub fn bench_head_scaling(extractor: &Extractor, k_grid: &[usize], repetitions: usize, seed: u64) -> Result<Vec<HeadScalingRow>> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be positive".into()));
    }
    if k_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("K grid must be strictly ascending".into()));
    }
    let d = extractor.dim();
    let p = extractor.input_dim();
    let patch = DMatrix::from_fn(p, 1, |i, _| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0);
    let heads: Vec<ClassifierHead> = k_grid
        .iter()
        .map(|&k| {
            ClassifierHead::new(
                DMatrix::from_fn(k, d, |i, j| (((i * 31 + j * 17) % 97) as f64 - 48.0) / 480.0),
                nalgebra::DVector::zeros(k),
            )
        })
        .collect::<Result<_>>()?;
    let mut total = vec![Vec::with_capacity(repetitions); k_grid.len()];
    let mut head_only = vec![Vec::with_capacity(repetitions); k_grid.len()];
    let mut sink = 0.0;
    let warmup = repetitions / 10 + 1;
    // round-robin over K so machine drift hits every size alike
    for rep in 0..repetitions + warmup {
        for (c, head) in heads.iter().enumerate() {
            let t0 = Instant::now();
            let f = extractor.forward(&patch)?;
            let t1 = Instant::now();
            let s = head.scores_batch(&f);
            let t2 = Instant::now();
            sink += s[(0, 0)];
            if rep >= warmup {
                total[c].push((t2 - t0).as_secs_f64());
                head_only[c].push((t2 - t1).as_secs_f64());
            }
        }
    }
    std::hint::black_box(sink);
    Ok(k_grid
        .iter()
        .zip(heads)
        .zip(total.into_iter().zip(head_only))
        .map(|((&k, head), (t, h))| {
            let (mt, mh) = (median(t), median(h));
            HeadScalingRow {
                k,
                param_count: head.param_count(),
                memory_bytes: head.param_count() * std::mem::size_of::<f64>(),
                extractor_flops: extractor.flops(),
                head_flops: 2 * k * d,
                median_total_s: mt,
                median_head_s: mh,
                head_share: if mt > 0.0 { mh / mt } else { 0.0 },
            }
        })
        .collect())
}

pub fn head_scaling_table(rows: &[HeadScalingRow]) -> String {
    let mut out = String::from("k\tparam_count\tmemory_bytes\textractor_flops\thead_flops\tmedian_total_s\tmedian_head_s\thead_share\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.3e}\t{:.3e}\t{:.4}\n",
            r.k, r.param_count, r.memory_bytes, r.extractor_flops, r.head_flops, r.median_total_s, r.median_head_s, r.head_share
        ));
    }
    out
}

/// Which landmark, if any, a simulated annotator clicks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "landmark")]
pub enum ClickPolicy {
    None,
    FixedPoint(usize),
    BestPoint,
}

impl ClickPolicy {
    pub fn name(&self) -> String {
        match self {
            ClickPolicy::None => "none".into(),
            ClickPolicy::FixedPoint(j) => format!("fixed_point({j})"),
            ClickPolicy::BestPoint => "best_point".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractiveRow {
    pub policy: ClickPolicy,
    pub failure_rate: f64,
    pub mean_error: f64,
    /// frames where no class was consistent with the click
    pub fallbacks: usize,
    pub frames: usize,
}

/// Simulates one click of ground truth per frame and reports the failure
/// rate of the resulting MAP prediction.
pub fn interactive_eval(
    posteriors: &[PosePosterior],
    shapes: &[Shape],
    classes: &PoseClassSet,
    tolerance: f64,
    policy: ClickPolicy,
) -> Result<InteractiveRow> {
    if posteriors.len() != shapes.len() {
        return Err(Error::Schema("one posterior per frame required".into()));
    }
    let n = classes.n_points();
    let per: Vec<(f64, bool)> = posteriors
        .par_iter()
        .zip(shapes)
        .map(|(p, gt)| {
            let predict = |j: usize| -> Result<Option<f64>> {
                let ev = Evidence::new(j, gt.point(j), tolerance)?;
                match condition(p, classes, &ev) {
                    Ok(q) => Ok(Some(canonical_error(&classes.centers[map_class(&q)], gt)?)),
                    Err(Error::NoConsistentClass) => Ok(None),
                    Err(e) => Err(e),
                }
            };
            let plain = canonical_error(&classes.centers[map_class(p)], gt)?;
            Ok(match policy {
                ClickPolicy::None => (plain, false),
                ClickPolicy::FixedPoint(j) => match predict(j)? {
                    Some(e) => (e, false),
                    None => (plain, true),
                },
                ClickPolicy::BestPoint => {
                    let mut best: Option<f64> = None;
                    for j in 0..n {
                        if let Some(e) = predict(j)? {
                            best = Some(best.map_or(e, |b: f64| b.min(e)));
                        }
                    }
                    match best {
                        Some(e) => (e, false),
                        None => (plain, true),
                    }
                }
            })
        })
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = per.iter().map(|x| x.0).collect();
    Ok(InteractiveRow {
        policy,
        failure_rate: failure_rate(&errors),
        mean_error: mean(&errors),
        fallbacks: per.iter().filter(|x| x.1).count(),
        frames: per.len(),
    })
}

/// Default click tolerance for a model with membership threshold `tau`.
pub fn interactive_tolerance(tau: f64) -> f64 {
    default_tolerance(tau)
}

pub fn interactive_table(rows: &[InteractiveRow]) -> String {
    let mut out = String::from("policy\tfailure_rate\tmean_error\tfallbacks\tframes\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.3}\t{:.6}\t{}\t{}\n",
            r.policy.name(),
            r.failure_rate,
            r.mean_error,
            r.fallbacks,
            r.frames
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::SIGMA_FLOOR;
    use crate::data::synth::{generate_synthetic, SyntheticConfig};

    fn small(seed: u64, n: usize) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n_examples: n,
            n_landmarks: 9,
            image_size: 40,
            face_size: [18.0, 20.0],
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn single_class_equals_mean_shape_error() {
        let (tr, va) = (small(1, 40), small(2, 20));
        let cfg = LossScalingConfig {
            k_grid: vec![1],
            extractor: ExtractorKind::Random { dim: 32 },
            patch: PatchSpec { size: 12, margin: 1.2 },
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            ..LossScalingConfig::default()
        };
        let rows = loss_scaling_experiment(&tr, &va, &cfg).unwrap();
        let mean_shape = Shape::mean(&tr.shapes().unwrap()).unwrap();
        let want = mean(&va.shapes().unwrap().iter().map(|s| canonical_error(&mean_shape, s).unwrap()).collect::<Vec<_>>());
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert!((r.val_landmark_error - want).abs() < 1e-12);
            assert!(r.val_multi_label_error <= r.val_exact_class_error);
        }
        assert_eq!(rows, loss_scaling_experiment(&tr, &va, &cfg).unwrap());
        assert!(loss_scaling_table(&rows).lines().count() == 4);
    }

    #[test]
    fn head_scaling_memory_is_exact() {
        let e = Extractor::new(ExtractorKind::Random { dim: 64 }, 16, 0).unwrap();
        let rows = bench_head_scaling(&e, &[10, 1000], 5, 0).unwrap();
        assert_eq!(rows[1].param_count, 65_000);
        assert_eq!(rows[0].param_count * 100, rows[1].param_count);
        assert_eq!(rows[1].memory_bytes, 8 * 65_000);
        assert!(bench_head_scaling(&e, &[10, 10], 5, 0).is_err());
    }

    #[test]
    fn interactive_policies_order() {
        let classes = PoseClassSet::new(
            vec![
                Shape::from_flat(vec![0.0, 0.0, 1.0, 0.0]).unwrap(),
                Shape::from_flat(vec![0.5, 0.0, 1.5, 0.0]).unwrap(),
            ],
            vec![SIGMA_FLOOR; 2],
            false,
        )
        .unwrap();
        let gt = vec![classes.centers[0].clone()];
        let wrong = vec![PosePosterior::new(vec![0.3, 0.7]).unwrap()];
        let none = interactive_eval(&wrong, &gt, &classes, 0.1, ClickPolicy::None).unwrap();
        let one = interactive_eval(&wrong, &gt, &classes, 0.1, ClickPolicy::FixedPoint(0)).unwrap();
        let best = interactive_eval(&wrong, &gt, &classes, 0.1, ClickPolicy::BestPoint).unwrap();
        assert_eq!((none.failure_rate, one.failure_rate, best.failure_rate), (100.0, 0.0, 0.0));

        // a click nowhere near any class falls back and is counted
        let far = vec![Shape::from_flat(vec![9.0, 9.0, 9.0, 9.0]).unwrap()];
        let fb = interactive_eval(&wrong, &far, &classes, 0.1, ClickPolicy::FixedPoint(0)).unwrap();
        assert_eq!(fb.fallbacks, 1);
        assert_eq!(interactive_table(&[none, one, best]).lines().count(), 4);
    }
}
