//! Video-time reasoning over pose classes: a sparse HMM decoded by
//! max-product, and a moving-average landmark filter.

use serde::{Deserialize, Serialize};

use crate::cluster::PoseClassSet;
use crate::error::{Error, Result};
use crate::inference::PosePosterior;
use crate::shape::{flat_distance_sq, Shape};

/// Sparse transition support between pose classes with two weight levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionStructure {
    /// sorted successors of each class, self included
    pub allowed: Vec<Vec<usize>>,
    /// per-row log weight of staying, after row normalization
    pub log_self: Vec<f64>,
    /// per-row log weight of moving to any allowed neighbor
    pub log_neighbor: Vec<f64>,
}

impl TransitionStructure {
    pub fn k(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_allowed(&self, from: usize, to: usize) -> bool {
        self.allowed.get(from).is_some_and(|s| s.binary_search(&to).is_ok())
    }

    /// Log weight of `from -> to`; `-inf` when disallowed.
    pub fn log_weight(&self, from: usize, to: usize) -> f64 {
        if from == to {
            self.log_self[from]
        } else if self.is_allowed(from, to) {
            self.log_neighbor[from]
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Links classes whose means lie within `tau_hmm` of each other.
pub fn build_transitions(classes: &PoseClassSet, tau_hmm: f64, self_weight: f64, neighbor_weight: f64) -> Result<TransitionStructure> {
    if !(tau_hmm >= 0.0) {
        return Err(Error::Config(format!("tau_hmm must be >= 0, got {tau_hmm}")));
    }
    if !(self_weight > 0.0 && neighbor_weight > 0.0 && self_weight.is_finite() && neighbor_weight.is_finite()) {
        return Err(Error::Config("transition weights must be positive".into()));
    }
    let k = classes.k();
    let t2 = tau_hmm * tau_hmm;
    let mut allowed = vec![Vec::new(); k];
    for a in 0..k {
        allowed[a].push(a);
        for b in a + 1..k {
            if flat_distance_sq(classes.centers[a].as_flat(), classes.centers[b].as_flat()) <= t2 {
                allowed[a].push(b);
                allowed[b].push(a);
            }
        }
    }
    allowed.iter_mut().for_each(|s| s.sort_unstable());
    let mut log_self = Vec::with_capacity(k);
    let mut log_neighbor = Vec::with_capacity(k);
    for s in &allowed {
        let z = self_weight + neighbor_weight * (s.len() - 1) as f64;
        log_self.push((self_weight / z).ln());
        log_neighbor.push((neighbor_weight / z).ln());
    }
    Ok(TransitionStructure {
        allowed,
        log_self,
        log_neighbor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    /// neighbor threshold; the model's membership threshold when absent
    pub tau_hmm: Option<f64>,
    pub self_weight: f64,
    pub neighbor_weight: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            tau_hmm: None,
            self_weight: 4.0,
            neighbor_weight: 1.0,
        }
    }
}

impl DecodeParams {
    /// Transition structure over `classes`, falling back to `tau` for the
    /// neighbor threshold.
    pub fn transitions(&self, classes: &PoseClassSet, tau: f64) -> Result<TransitionStructure> {
        build_transitions(classes, self.tau_hmm.unwrap_or(tau), self.self_weight, self.neighbor_weight)
    }
}

/// Per-frame posteriors of one video, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub posteriors: Vec<PosePosterior>,
    /// frame indices reported in errors
    pub frames: Vec<usize>,
}

impl FrameSequence {
    pub fn new(posteriors: Vec<PosePosterior>, frames: Vec<usize>) -> Result<Self> {
        if posteriors.is_empty() {
            return Err(Error::Contract("frame sequence is empty".into()));
        }
        if frames.len() != posteriors.len() {
            return Err(Error::Schema("one frame index per posterior".into()));
        }
        let k = posteriors[0].k();
        if posteriors.iter().any(|p| p.k() != k) {
            return Err(Error::Schema("posteriors disagree on K".into()));
        }
        Ok(Self { posteriors, frames })
    }

    /// Frames numbered `0..T`.
    pub fn from_posteriors(posteriors: Vec<PosePosterior>) -> Result<Self> {
        let frames = (0..posteriors.len()).collect();
        Self::new(posteriors, frames)
    }

    pub fn len(&self) -> usize {
        self.posteriors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posteriors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPath {
    pub classes: Vec<usize>,
    /// sum of log posteriors plus log transition weights along the path
    pub log_score: f64,
}

/// Max-product decoding in log space.
///
/// Among equally scoring paths the last frame takes the lowest class, and
/// each earlier frame the lowest predecessor that keeps the optimum.
pub fn viterbi(seq: &FrameSequence, trans: &TransitionStructure) -> Result<DecodedPath> {
    let k = trans.k();
    if seq.posteriors[0].k() != k {
        return Err(Error::Schema(format!(
            "posteriors have {} classes, transitions {}",
            seq.posteriors[0].k(),
            k
        )));
    }
    let logp = |t: usize, c: usize| seq.posteriors[t].probs()[c].ln();
    let mut delta: Vec<f64> = (0..k).map(|c| logp(0, c)).collect();
    if delta.iter().all(|d| *d == f64::NEG_INFINITY) {
        return Err(Error::Infeasible { frame: seq.frames[0] });
    }
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(seq.len() - 1);
    for t in 1..seq.len() {
        let mut next = vec![f64::NEG_INFINITY; k];
        let mut bp = vec![usize::MAX; k];
        for c in 0..k {
            let lp = logp(t, c);
            if lp == f64::NEG_INFINITY {
                continue;
            }
            // allowed is symmetric, so the successor list doubles as predecessors
            for &j in &trans.allowed[c] {
                if delta[j] == f64::NEG_INFINITY {
                    continue;
                }
                let s = delta[j] + trans.log_weight(j, c) + lp;
                if s > next[c] {
                    next[c] = s;
                    bp[c] = j;
                }
            }
        }
        if next.iter().all(|d| *d == f64::NEG_INFINITY) {
            return Err(Error::Infeasible { frame: seq.frames[t] });
        }
        delta = next;
        back.push(bp);
    }
    let mut last = 0;
    for c in 1..k {
        if delta[c] > delta[last] {
            last = c;
        }
    }
    let log_score = delta[last];
    let mut path = vec![last; seq.len()];
    for t in (1..seq.len()).rev() {
        path[t - 1] = back[t - 1][path[t]];
    }
    Ok(DecodedPath {
        classes: path,
        log_score,
    })
}

/// Log score of a given path, accumulated in the same order as [`viterbi`].
pub fn path_log_score(seq: &FrameSequence, trans: &TransitionStructure, path: &[usize]) -> f64 {
    let mut s = seq.posteriors[0].probs()[path[0]].ln();
    for t in 1..path.len() {
        s = s + trans.log_weight(path[t - 1], path[t]) + seq.posteriors[t].probs()[path[t]].ln();
    }
    s
}

/// Centered moving average per coordinate; edge frames average only the
/// frames that exist.
pub fn lowpass_smooth(shapes: &[Shape], window: usize) -> Result<Vec<Shape>> {
    if shapes.is_empty() {
        return Err(Error::Contract("cannot smooth an empty sequence".into()));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!("smoothing window must be odd and >= 1, got {window}")));
    }
    let n = shapes[0].n_points();
    if shapes.iter().any(|s| s.n_points() != n) {
        return Err(Error::Schema("shapes in a sequence must share N".into()));
    }
    let half = window / 2;
    (0..shapes.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(shapes.len() - 1);
            let cnt = (hi - lo + 1) as f64;
            let coords = (0..2 * n)
                .map(|c| shapes[lo..=hi].iter().map(|s| s.as_flat()[c]).sum::<f64>() / cnt)
                .collect();
            Shape::from_flat(coords)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::SIGMA_FLOOR;
    use proptest::prelude::*;

    fn line_classes(xs: &[f64]) -> PoseClassSet {
        PoseClassSet::new(
            xs.iter().map(|&x| Shape::from_flat(vec![x, 0.0]).unwrap()).collect(),
            vec![SIGMA_FLOOR; xs.len()],
            false,
        )
        .unwrap()
    }

    fn post(p: &[f64]) -> PosePosterior {
        PosePosterior::new(p.to_vec()).unwrap()
    }

    #[test]
    fn transition_support() {
        let c = line_classes(&[0.0, 1.0, 2.5]);
        let t0 = build_transitions(&c, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(t0.allowed, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(t0.log_self, vec![0.0; 3]);
        let all = build_transitions(&c, 10.0, 1.0, 1.0).unwrap();
        assert!(all.allowed.iter().all(|s| s == &vec![0, 1, 2]));
        let mid = build_transitions(&c, 1.5, 2.0, 1.0).unwrap();
        assert_eq!(mid.allowed, vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]);
        assert!((mid.log_self[1] - 0.5f64.ln()).abs() < 1e-15);
        assert!((mid.log_neighbor[0] - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!(build_transitions(&c, -1.0, 1.0, 1.0).is_err());
        assert!(build_transitions(&c, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn two_state_example() {
        let c = line_classes(&[0.0, 5.0]);
        let t = build_transitions(&c, 1.0, 1.0, 1.0).unwrap();
        let seq = FrameSequence::from_posteriors(vec![post(&[0.9, 0.1]), post(&[0.2, 0.8])]).unwrap();
        let d = viterbi(&seq, &t).unwrap();
        assert_eq!(d.classes, vec![0, 0]);
        assert!((d.log_score - (0.9f64 * 0.2).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_frame_is_argmax() {
        let c = line_classes(&[0.0, 1.0, 2.0]);
        let t = build_transitions(&c, 1.0, 3.0, 1.0).unwrap();
        let seq = FrameSequence::from_posteriors(vec![post(&[0.2, 0.5, 0.3])]).unwrap();
        assert_eq!(viterbi(&seq, &t).unwrap().classes, vec![1]);
        let tie = FrameSequence::from_posteriors(vec![post(&[0.4, 0.2, 0.4])]).unwrap();
        assert_eq!(viterbi(&tie, &t).unwrap().classes, vec![0]);
    }

    #[test]
    fn infeasible_names_first_dead_end() {
        let c = line_classes(&[0.0, 5.0]);
        let t = build_transitions(&c, 0.0, 1.0, 1.0).unwrap();
        let seq = FrameSequence::new(
            vec![post(&[1.0, 0.0]), post(&[1.0, 0.0]), post(&[0.0, 1.0]), post(&[0.0, 1.0])],
            vec![10, 11, 12, 13],
        )
        .unwrap();
        assert!(matches!(viterbi(&seq, &t), Err(Error::Infeasible { frame: 12 })));
    }

    #[test]
    fn smoothing_examples() {
        let s = |x: f64| Shape::from_flat(vec![x, 0.0]).unwrap();
        let out = lowpass_smooth(&[s(0.0), s(3.0), s(6.0)], 3).unwrap();
        assert_eq!(out, vec![s(1.5), s(3.0), s(4.5)]);
        let c = vec![s(2.0); 5];
        assert_eq!(lowpass_smooth(&c, 3).unwrap(), c);
        assert_eq!(lowpass_smooth(&c[..1], 1).unwrap(), c[..1].to_vec());
        assert!(lowpass_smooth(&[], 3).is_err());
        assert!(lowpass_smooth(&c, 2).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, f64, f64)> {
        (1usize..=5, 1usize..=5).prop_flat_map(|(k, t)| {
            (
                proptest::collection::vec(0.0f64..4.0, k),
                proptest::collection::vec(proptest::collection::vec(0u8..4, k), t)
                    .prop_map(|rows| rows.into_iter().map(|r| r.into_iter().map(|v| v as f64 + 0.5).collect()).collect()),
                0.0f64..3.0,
                0.2f64..3.0,
            )
        })
    }

    proptest! {
        #[test]
        fn path_respects_structure_and_beats_argmax((xs, rows, tau, sw) in instance()) {
            let c = line_classes(&xs);
            let t = build_transitions(&c, tau, sw, 1.0).unwrap();
            let posts: Vec<PosePosterior> = rows.iter().map(|r| {
                let z: f64 = r.iter().sum();
                post(&r.iter().map(|v| v / z).collect::<Vec<_>>())
            }).collect();
            let seq = FrameSequence::from_posteriors(posts.clone()).unwrap();
            let d = viterbi(&seq, &t).unwrap();
            for w in d.classes.windows(2) {
                prop_assert!(t.is_allowed(w[0], w[1]));
            }
            prop_assert_eq!(path_log_score(&seq, &t, &d.classes), d.log_score);
            let greedy: Vec<usize> = posts.iter().map(crate::inference::map_class).collect();
            let g = path_log_score(&seq, &t, &greedy);
            if g.is_finite() {
                prop_assert!(d.log_score >= g);
            }
        }
    }
}
