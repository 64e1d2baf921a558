//! Click scoring and the (K+1)-way negative-sampling loss.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};

/// Raw inner product `sᵀc`.
pub fn score(s: &[f64], c: &[f64]) -> Result<f64> {
    if s.len() != c.len() {
        return Err(Error::Contract(format!(
            "session vector has {} dims, news vector {}",
            s.len(),
            c.len()
        )));
    }
    Ok(s.iter().zip(c).map(|(a, b)| a * b).sum())
}

/// How per-positive loss terms combine across a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::Config(format!("reduction {s:?} must be sum or mean"))),
        }
    }
}

fn group_term(pos: f64, neg: &[f64]) -> f64 {
    let m = neg.iter().copied().fold(pos, f64::max);
    let z: f64 = (pos - m).exp() + neg.iter().map(|n| (n - m).exp()).sum::<f64>();
    m + z.ln() - pos
}

/// `−Σ_j log softmax([ŷ⁺_j, ŷ⁻_{j,1..K}])₀`, summed over positives.
pub fn nll_loss(pos: &[f64], neg: &[Vec<f64>]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::Config("loss needs at least one positive".into()));
    }
    if pos.len() != neg.len() {
        return Err(Error::dim("nll_loss", &[pos.len()], &[neg.len()]));
    }
    let k = neg[0].len();
    if k == 0 {
        return Err(Error::Config("loss needs K ≥ 1 negatives per positive".into()));
    }
    if let Some(bad) = neg.iter().find(|n| n.len() != k) {
        return Err(Error::dim("nll_loss", &[k], &[bad.len()]));
    }
    Ok(pos.iter().zip(neg).map(|(&p, n)| group_term(p, n)).sum())
}

/// Tape version of [`nll_loss`]. Each group is a `K+1` score vector with the
/// positive first.
pub fn nll_loss_tape(tape: &mut Tape<'_>, groups: &[Var], reduction: Reduction) -> Result<Var> {
    if groups.is_empty() {
        return Err(Error::Config("loss needs at least one positive".into()));
    }
    let mut terms = Vec::with_capacity(groups.len());
    for &g in groups {
        if tape.shape(g).len() != 1 || tape.shape(g)[0] < 2 {
            return Err(Error::Config(format!(
                "loss group has shape {:?}; needs one positive and K ≥ 1 negatives",
                tape.shape(g)
            )));
        }
        let lse = tape.log_sum_exp(g)?;
        let pos = tape.select(g, 0)?;
        terms.push(tape.sub(lse, pos)?);
    }
    let n = terms.len();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.scale(total, 1.0 / n as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
        assert!(matches!(score(&[1.0], &[1.0, 2.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_examples() {
        assert!((nll_loss(&[0.3], &[vec![0.3]]).unwrap() - LN_2).abs() < 1e-15);
        assert!(nll_loss(&[800.0], &[vec![0.0, -3.0]]).unwrap() < 1e-300);
        assert!(matches!(nll_loss(&[0.3], &[vec![]]), Err(Error::Config(_))));
        assert!(matches!(nll_loss(&[], &[]), Err(Error::Config(_))));
    }

    #[test]
    fn two_group_loss_matches_direct_formula() {
        let pos: [f64; 2] = [1.25, -0.5];
        let neg = [vec![0.75, 2.0], vec![-1.5, 0.1]];
        // −log(e^p / (e^p + Σ e^n)) evaluated without any shift.
        let direct: f64 = pos
            .iter()
            .zip(&neg)
            .map(|(p, n)| -(p.exp() / (p.exp() + n.iter().map(|x: &f64| x.exp()).sum::<f64>())).ln())
            .sum();
        assert!((nll_loss(&pos, &neg).unwrap() - direct).abs() < 1e-12);

        let mut tape = Tape::new();
        let groups: Vec<Var> = pos
            .iter()
            .zip(&neg)
            .map(|(p, n)| tape.leaf(Tensor::vector([vec![*p], n.clone()].concat())))
            .collect();
        let sum = nll_loss_tape(&mut tape, &groups, Reduction::Sum).unwrap();
        let mean = nll_loss_tape(&mut tape, &groups, Reduction::Mean).unwrap();
        assert!((tape.scalar(sum) - direct).abs() < 1e-12);
        assert!((tape.scalar(mean) - direct / 2.0).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_rejects_groups_without_negatives() {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::vector(vec![1.0]));
        assert!(matches!(nll_loss_tape(&mut tape, &[g], Reduction::Sum), Err(Error::Config(_))));
    }

    fn scores() -> impl Strategy<Value = (f64, Vec<f64>)> {
        (-20.0..20.0f64, prop::collection::vec(-20.0..20.0f64, 1..6))
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative(groups in prop::collection::vec(scores(), 1..5)) {
            let (pos, neg): (Vec<f64>, Vec<Vec<f64>>) = groups.into_iter().unzip();
            let k = neg[0].len();
            let neg: Vec<Vec<f64>> = neg.into_iter().map(|mut n| { n.resize(k, 0.0); n }).collect();
            prop_assert!(nll_loss(&pos, &neg).unwrap() >= 0.0);
        }

        #[test]
        fn equal_scores_give_log_k_plus_one(v in -50.0..50.0f64, k in 1usize..10, p in 1usize..4) {
            let loss = nll_loss(&vec![v; p], &vec![vec![v; k]; p]).unwrap();
            prop_assert!((loss - p as f64 * ((k + 1) as f64).ln()).abs() < 1e-12);
        }

        #[test]
        fn shifting_a_group_leaves_loss_unchanged((pos, neg) in scores(), c in -100.0..100.0f64) {
            let base = nll_loss(&[pos], &[neg.clone()]).unwrap();
            let shifted: Vec<f64> = neg.iter().map(|n| n + c).collect();
            let moved = nll_loss(&[pos + c], &[shifted]).unwrap();
            prop_assert!((base - moved).abs() < 1e-9 * base.abs().max(1.0));
        }

        #[test]
        fn permuting_negatives_leaves_loss_unchanged((pos, mut neg) in scores(), seed in any::<u64>()) {
            let base = nll_loss(&[pos], &[neg.clone()]).unwrap();
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            neg.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert!((nll_loss(&[pos], &[neg]).unwrap() - base).abs() < 1e-12 * base.max(1.0));
        }

        #[test]
        fn gradient_signs(pos in -15.0..15.0f64, neg in prop::collection::vec(-15.0..15.0f64, 1..6)) {
            let mut tape = Tape::new();
            let g = tape.leaf(Tensor::vector([vec![pos], neg.clone()].concat()).with_grad());
            let l = nll_loss_tape(&mut tape, &[g], Reduction::Sum).unwrap();
            let grads = tape.backward(l).unwrap();
            let d = grads.get(g).unwrap();
            prop_assert!(d[0] < 0.0);
            prop_assert!(d[1..].iter().all(|x| *x > 0.0));
        }
    }
}
