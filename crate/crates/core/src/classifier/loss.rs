//! Training losses over a K-vector of scores, each returning the loss and its
//! gradient with respect to the scores.

use serde::{Deserialize, Serialize};

use super::train::argmax;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// cross-entropy against the nearest class
    Softmax,
    /// cross-entropy against a uniform target over the membership set
    SoftTarget,
    /// independent logistic loss per class
    MultiLabel,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Softmax, LossKind::SoftTarget, LossKind::MultiLabel];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::SoftTarget => "soft_target",
            LossKind::MultiLabel => "multi_label",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}'")))
    }
}

/// `log(sum(exp(s)))` with the max shifted out; the max term's unit
/// contribution goes through `ln_1p` to keep small tails exact.
pub fn log_sum_exp(s: &[f64]) -> f64 {
    let Some(top) = (!s.is_empty()).then(|| argmax(s)) else {
        return f64::NEG_INFINITY;
    };
    let m = s[top];
    if !m.is_finite() {
        return m;
    }
    let rest: f64 = s
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, v)| (v - m).exp())
        .sum();
    m + rest.ln_1p()
}

/// Probabilities `softmax(s)`.
pub fn softmax(s: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(s);
    s.iter().map(|v| (v - lse).exp()).collect()
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_index(c: usize, k: usize) -> Result<()> {
    if c >= k {
        return Err(Error::IndexOutOfRange { index: c, len: k });
    }
    Ok(())
}

fn check_members(members: &[usize], k: usize) -> Result<()> {
    if members.is_empty() {
        return Err(Error::Contract("membership set must be nonempty".into()));
    }
    members.iter().try_for_each(|&c| check_index(c, k))
}

pub fn softmax_loss(s: &[f64], c: usize) -> Result<(f64, Vec<f64>)> {
    check_index(c, s.len())?;
    let lse = log_sum_exp(s);
    let mut grad: Vec<f64> = s.iter().map(|v| (v - lse).exp()).collect();
    grad[c] -= 1.0;
    // shifting by s[c] first keeps a confident loss free of cancellation
    let shifted: Vec<f64> = s.iter().map(|v| v - s[c]).collect();
    Ok((log_sum_exp(&shifted), grad))
}

/// `members` must be sorted and free of duplicates.
pub fn soft_target_loss(s: &[f64], members: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_members(members, s.len())?;
    if let [c] = members {
        return softmax_loss(s, *c);
    }
    let lse = log_sum_exp(s);
    let q = 1.0 / members.len() as f64;
    let loss = members.iter().map(|&c| q * (lse - s[c])).sum();
    let mut grad: Vec<f64> = s.iter().map(|v| (v - lse).exp()).collect();
    for &c in members {
        grad[c] -= q;
    }
    Ok((loss, grad))
}

/// `members` must be sorted and free of duplicates.
pub fn multi_label_loss(s: &[f64], members: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_members(members, s.len())?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(s.len());
    let mut next = members.iter().peekable();
    for (k, &v) in s.iter().enumerate() {
        let positive = next.next_if(|&&c| c == k).is_some();
        if positive {
            loss += softplus(-v);
            grad.push(sigmoid(v) - 1.0);
        } else {
            loss += softplus(v);
            grad.push(sigmoid(v));
        }
    }
    Ok((loss, grad))
}

/// Dispatches on `kind`; softmax uses `nearest`, the others `members`.
pub fn loss_and_grad(kind: LossKind, s: &[f64], nearest: usize, members: &[usize]) -> Result<(f64, Vec<f64>)> {
    match kind {
        LossKind::Softmax => softmax_loss(s, nearest),
        LossKind::SoftTarget => soft_target_loss(s, members),
        LossKind::MultiLabel => multi_label_loss(s, members),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let (l, g) = softmax_loss(&[0.0, 0.0], 0).unwrap();
        assert!(close(l, LN2, 1e-15));
        assert_eq!(g, vec![-0.5, 0.5]);
        let (l, _) = softmax_loss(&[10.0, 0.0], 0).unwrap();
        assert!(close(l, (-10.0f64).exp().ln_1p(), 1e-19));
        assert!(close(l, 4.54e-5, 1e-7));
        assert!(softmax_loss(&[0.0], 1).is_err());
    }

    #[test]
    fn large_scores_stay_finite() {
        let (l, g) = softmax_loss(&[1e4, -1e4, 0.0], 1).unwrap();
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
        assert!(close(l, 2e4, 1e-9));
        let (l, g) = multi_label_loss(&[1e4, -1e4], &[1]).unwrap();
        assert!(close(l, 2e4, 1e-9) && g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn soft_target_examples() {
        let s = [0.3, -1.2, 2.0, 0.1];
        for c in 0..4 {
            assert_eq!(soft_target_loss(&s, &[c]).unwrap(), softmax_loss(&s, c).unwrap());
        }
        let (l, _) = soft_target_loss(&[0.5; 4], &[1, 3]).unwrap();
        assert!(close(l, 4f64.ln(), 1e-15));
        let (_, g) = soft_target_loss(&[0.5; 4], &[0, 1, 2, 3]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-16));
        assert!(matches!(soft_target_loss(&s, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn multi_label_examples() {
        let (l, g) = multi_label_loss(&[0.0; 3], &[0]).unwrap();
        assert!(close(l, 3.0 * LN2, 1e-15));
        assert_eq!(g, vec![-0.5, 0.5, 0.5]);
        let (l6, _) = multi_label_loss(&[0.0; 6], &[0]).unwrap();
        assert!(close(l6 - l, 3.0 * LN2, 1e-14));
        assert!(matches!(multi_label_loss(&[0.0], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn shift_invariance_differs_between_families() {
        let s = [0.4, -0.3, 1.1];
        let t: Vec<f64> = s.iter().map(|v| v + 2.5).collect();
        let a = softmax_loss(&s, 1).unwrap().0;
        assert!(close(a, softmax_loss(&t, 1).unwrap().0, 1e-12));
        let a = soft_target_loss(&s, &[0, 2]).unwrap().0;
        assert!(close(a, soft_target_loss(&t, &[0, 2]).unwrap().0, 1e-12));
        let a = multi_label_loss(&s, &[0, 2]).unwrap().0;
        assert!((a - multi_label_loss(&t, &[0, 2]).unwrap().0).abs() > 1e-3);
    }

    #[test]
    fn helpers() {
        assert!(close(softplus(0.0), LN2, 1e-15));
        assert!(close(softplus(800.0), 800.0, 1e-12));
        assert!(close(sigmoid(0.0), 0.5, 1e-15));
        assert_eq!(sigmoid(-800.0), 0.0);
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!(close(p.iter().sum::<f64>(), 1.0, 1e-15));
        assert_eq!("multi_label".parse::<LossKind>().unwrap(), LossKind::MultiLabel);
        assert!("hinge".parse::<LossKind>().is_err());
    }

    fn members_strategy(k: usize) -> impl Strategy<Value = Vec<usize>> {
        prop::collection::btree_set(0..k, 1..=k).prop_map(|s| s.into_iter().collect())
    }

    proptest! {
        #[test]
        fn multi_label_gradient_ignores_other_members(
            s in prop::collection::vec(-4.0..4.0f64, 6),
            extra in members_strategy(6),
        ) {
            let (_, g1) = multi_label_loss(&s, &[0]).unwrap();
            let mut m = extra.clone();
            if !m.contains(&0) { m.push(0); m.sort(); }
            let (_, g2) = multi_label_loss(&s, &m).unwrap();
            prop_assert_eq!(g1[0], g2[0]);
        }

        #[test]
        fn cross_entropy_gradients_sum_to_zero(
            s in prop::collection::vec(-6.0..6.0f64, 2..10),
            seed in 0usize..1000,
        ) {
            let k = s.len();
            let (_, g) = softmax_loss(&s, seed % k).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
            let members: Vec<usize> = (0..k).filter(|c| (c + seed) % 3 == 0).collect();
            if !members.is_empty() {
                let (_, g) = soft_target_loss(&s, &members).unwrap();
                prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }
}
