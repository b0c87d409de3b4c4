//! Fixtures shared by the benchmarks.

use posekit_core::cluster::PoseClassSet;
use posekit_core::inference::PosePosterior;
use posekit_core::shape::Shape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `k` random canonical shapes of `n` points with a fixed bandwidth.
pub fn random_classes(k: usize, n: usize, seed: u64) -> PoseClassSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = (0..k)
        .map(|_| Shape::from_flat((0..2 * n).map(|_| rng.random_range(-0.4..0.4)).collect()).expect("finite coordinates"))
        .collect();
    PoseClassSet::new(centers, vec![0.05; k], false).expect("valid class set")
}

/// Strictly positive random posteriors, one per frame.
pub fn random_posteriors(k: usize, frames: usize, seed: u64) -> Vec<PosePosterior> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|_| {
            let scores: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
            PosePosterior::from_scores(&scores, 1.0).expect("finite scores")
        })
        .collect()
}

/// Random score vector and a membership set of `members` classes.
pub fn random_scores(k: usize, members: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut m: Vec<usize> = (0..members.min(k)).map(|i| i * (k / members.max(1)).max(1)).collect();
    m.dedup();
    (s, m)
}
