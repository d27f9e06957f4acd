//! Majority-vote classification of target samples and accuracy bookkeeping.

use crate::error::{Error, Result};

/// Votes of each classifier for one sample and the resulting decision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteRecord {
    pub votes: Vec<usize>,
    pub decision: usize,
}

/// The most frequent vote; ties go to the lowest class index.
pub fn vote(votes: &[usize]) -> Option<usize> {
    let max_class = *votes.iter().max()?;
    let mut counts = vec![0usize; max_class + 1];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for (class, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = class;
        }
    }
    Some(best)
}

/// `predictions[i][j]` is classifier `i`'s class for sample `j`.
pub fn majority_vote(predictions: &[Vec<usize>]) -> Result<Vec<usize>> {
    Ok(vote_records(predictions)?
        .into_iter()
        .map(|r| r.decision)
        .collect())
}

pub fn vote_records(predictions: &[Vec<usize>]) -> Result<Vec<VoteRecord>> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::Domain("majority vote needs at least one classifier".into()))?;
    let n = first.len();
    if let Some(i) = predictions.iter().position(|p| p.len() != n) {
        return Err(Error::ShapeMismatch(format!(
            "classifier {i} voted on {} samples, expected {n}",
            predictions[i].len()
        )));
    }
    Ok((0..n)
        .map(|j| {
            let votes: Vec<usize> = predictions.iter().map(|p| p[j]).collect();
            let decision = vote(&votes).expect("at least one vote");
            VoteRecord { votes, decision }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Evaluation {
    pub fn correct(&self) -> u64 {
        (0..self.confusion.len())
            .map(|k| self.confusion[k][k])
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

pub fn evaluate(decisions: &[usize], labels: &[usize], classes: usize) -> Result<Evaluation> {
    if decisions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} decisions but {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    if decisions.is_empty() {
        return Err(Error::Domain(
            "cannot evaluate an empty prediction set".into(),
        ));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&d, &y) in decisions.iter().zip(labels) {
        if d >= classes || y >= classes {
            return Err(Error::Domain(format!(
                "class {} outside [0, {classes})",
                d.max(y)
            )));
        }
        confusion[y][d] += 1;
    }
    let correct: u64 = (0..classes).map(|k| confusion[k][k]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / decisions.len() as f64,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strict_majority() {
        assert_eq!(
            majority_vote(&[vec![3], vec![3], vec![7]]).unwrap(),
            vec![3]
        );
    }

    #[test]
    fn single_voter() {
        assert_eq!(majority_vote(&[vec![5]]).unwrap(), vec![5]);
    }

    #[test]
    fn tie_goes_to_lowest_class() {
        assert_eq!(majority_vote(&[vec![2], vec![4]]).unwrap(), vec![2]);
        assert_eq!(majority_vote(&[vec![4], vec![2]]).unwrap(), vec![2]);
        assert_eq!(vote(&[9, 1, 9, 1, 0]), Some(1));
    }

    #[test]
    fn no_classifiers_is_an_error() {
        assert!(majority_vote(&[]).is_err());
        assert!(majority_vote(&[vec![1, 2], vec![1]]).is_err());
    }

    #[test]
    fn all_correct() {
        let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let e = evaluate(&labels, &labels, 4).unwrap();
        assert_eq!(e.accuracy, 1.0);
        for (i, row) in e.confusion.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert_eq!(c == 0, i != j);
            }
        }
    }

    #[test]
    fn constant_prediction_on_uniform_labels() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let e = evaluate(&[0; 100], &labels, 10).unwrap();
        assert_eq!(e.accuracy, 0.1);
    }

    #[test]
    fn empty_is_domain_error() {
        assert!(matches!(evaluate(&[], &[], 10), Err(Error::Domain(_))));
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d: Vec<usize> = (0..100).map(|_| rng.random_range(0..10)).collect();
        let y: Vec<usize> = (0..100).map(|_| rng.random_range(0..10)).collect();
        let e = evaluate(&d, &y, 10).unwrap();
        let mut correct = 0;
        for i in 0..100 {
            if d[i] == y[i] {
                correct += 1;
            }
        }
        assert_eq!(e.accuracy, correct as f64 / 100.0);
        for t in 0..10 {
            for p in 0..10 {
                let mut count = 0;
                for i in 0..100 {
                    if y[i] == t && d[i] == p {
                        count += 1;
                    }
                }
                assert_eq!(e.confusion[t][p], count);
            }
        }
    }

    proptest! {
        #[test]
        fn decision_is_a_mode(votes in prop::collection::vec(0usize..6, 1..12)) {
            let d = vote(&votes).unwrap();
            let count = |c: usize| votes.iter().filter(|&&v| v == c).count();
            prop_assert!((0..6).all(|c| count(c) <= count(d)));
        }

        #[test]
        fn permutation_invariant(mut votes in prop::collection::vec(0usize..6, 1..12), seed in any::<u64>()) {
            let d = vote(&votes).unwrap();
            use rand::seq::SliceRandom;
            votes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(vote(&votes).unwrap(), d);
        }

        #[test]
        fn unanimous_equals_any(preds in prop::collection::vec(0usize..10, 1..30), n in 1usize..6) {
            let all = vec![preds.clone(); n];
            prop_assert_eq!(majority_vote(&all).unwrap(), preds);
        }

        #[test]
        fn accuracy_is_trace_over_sum(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..50)) {
            let (d, y): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let e = evaluate(&d, &y, 5).unwrap();
            prop_assert_eq!(e.accuracy, e.correct() as f64 / e.total() as f64);
        }
    }
}
