use rand::seq::SliceRandom;

use crate::datasets::{apply_shift, DomainShiftSpec, LabeledSample, LabeledShard, UnlabeledShard};
use crate::error::{Error, Result};
use crate::seed;

/// How source shards draw their samples.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Skew {
    #[default]
    Iid,
    /// Client `i` fills `fraction` of its shard from classes `2i mod K` and
    /// `2i+1 mod K` when enough of them remain.
    Label { fraction: f64, classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub source_counts: Vec<usize>,
    pub target_train: usize,
    pub target_test: usize,
    pub seed: u64,
    pub skew: Skew,
}

impl PartitionPlan {
    /// `sources` shards of `per_source` samples each, IID.
    pub fn even(
        sources: usize,
        per_source: usize,
        target_train: usize,
        target_test: usize,
        seed: u64,
    ) -> Self {
        Self {
            source_counts: vec![per_source; sources],
            target_train,
            target_test,
            seed,
            skew: Skew::Iid,
        }
    }

    pub fn total(&self) -> usize {
        self.source_counts.iter().sum::<usize>() + self.target_train + self.target_test
    }

    pub fn validate(&self, available: usize) -> Result<()> {
        if self.source_counts.is_empty() {
            return Err(Error::Config(
                "partition needs at least one source client".into(),
            ));
        }
        if let Some(i) = self.source_counts.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!(
                "source client {} gets zero samples",
                i + 1
            )));
        }
        if self.target_train == 0 || self.target_test == 0 {
            return Err(Error::Config(
                "target train and test counts must be positive".into(),
            ));
        }
        if self.total() > available {
            return Err(Error::Config(format!(
                "partition needs {} samples but only {available} are available",
                self.total()
            )));
        }
        if let Skew::Label { fraction, classes } = self.skew {
            if !(0.0..=1.0).contains(&fraction) || classes == 0 {
                return Err(Error::Config(
                    "label skew needs fraction in [0,1] and classes > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Partition {
    pub sources: Vec<LabeledShard>,
    pub target_train: UnlabeledShard,
    pub target_test: LabeledShard,
}

impl Partition {
    /// Applies `spec` to both target shards; source shards are untouched.
    pub fn shift_target(self, spec: &DomainShiftSpec, noise_seed: u64) -> Result<Self> {
        if spec.is_identity() {
            return Ok(self);
        }
        Ok(Self {
            target_train: self
                .target_train
                .map_images(|s| apply_shift(s, spec, seed::derive(noise_seed, 1)))?,
            target_test: self
                .target_test
                .map_images(|s| apply_shift(s, spec, seed::derive(noise_seed, 2)))?,
            sources: self.sources,
        })
    }
}

/// Splits `samples` into disjoint source shards, an unlabeled target training
/// shard and a labeled target test shard, after a seeded shuffle.
pub fn partition(samples: &[LabeledSample], plan: &PartitionPlan) -> Result<Partition> {
    plan.validate(samples.len())?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed::rng(plan.seed, 0x5041_5254));

    let mut taken = vec![false; samples.len()];
    let mut cursor = 0;
    let mut next_free = |taken: &mut Vec<bool>| -> usize {
        while taken[order[cursor]] {
            cursor += 1;
        }
        let idx = order[cursor];
        taken[idx] = true;
        idx
    };

    let mut source_ids = Vec::with_capacity(plan.source_counts.len());
    for (i, &count) in plan.source_counts.iter().enumerate() {
        let mut ids = Vec::with_capacity(count);
        if let Skew::Label { fraction, classes } = plan.skew {
            let favored = [(2 * i) % classes, (2 * i + 1) % classes];
            let want = (fraction * count as f64).round() as usize;
            for &idx in &order {
                if ids.len() == want {
                    break;
                }
                if !taken[idx] && favored.contains(&samples[idx].label) {
                    taken[idx] = true;
                    ids.push(idx);
                }
            }
        }
        while ids.len() < count {
            ids.push(next_free(&mut taken));
        }
        source_ids.push(ids);
    }
    let train_ids: Vec<usize> = (0..plan.target_train)
        .map(|_| next_free(&mut taken))
        .collect();
    let test_ids: Vec<usize> = (0..plan.target_test)
        .map(|_| next_free(&mut taken))
        .collect();

    Ok(Partition {
        sources: source_ids
            .into_iter()
            .map(|ids| LabeledShard::gather(samples, ids))
            .collect::<Result<_>>()?,
        target_train: UnlabeledShard::gather(samples, train_ids)?,
        target_test: LabeledShard::gather(samples, test_ids)?,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::tensor::Tensor;

    fn samples(n: usize) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| LabeledSample {
                image: Tensor::filled(vec![1, 2, 2], (i % 256) as f64 / 255.0),
                label: i % 10,
            })
            .collect()
    }

    #[test]
    fn ten_even_shards_are_disjoint() {
        let s = samples(17_000);
        let p = partition(&s, &PartitionPlan::even(10, 1500, 1000, 1000, 4)).unwrap();
        let mut seen = HashSet::new();
        for shard in &p.sources {
            assert_eq!(shard.len(), 1500);
            for &i in shard.sample_ids() {
                assert!(seen.insert(i));
            }
        }
        for &i in p
            .target_train
            .sample_ids()
            .iter()
            .chain(p.target_test.sample_ids())
        {
            assert!(seen.insert(i));
        }
        assert_eq!(seen.len(), 17_000);
    }

    #[test]
    fn single_client_takes_everything() {
        let s = samples(30);
        let p = partition(&s, &PartitionPlan::even(1, 28, 1, 1, 0)).unwrap();
        let mut ids = p.sources[0].sample_ids().to_vec();
        ids.extend(p.target_train.sample_ids());
        ids.extend(p.target_test.sample_ids());
        ids.sort_unstable();
        assert_eq!(ids, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn seeded_membership() {
        let s = samples(200);
        let plan = PartitionPlan::even(3, 40, 20, 20, 11);
        let a = partition(&s, &plan).unwrap();
        let b = partition(&s, &plan).unwrap();
        for (x, y) in a.sources.iter().zip(&b.sources) {
            assert_eq!(x.sample_ids(), y.sample_ids());
        }
        let c = partition(&s, &PartitionPlan { seed: 12, ..plan }).unwrap();
        assert_ne!(a.sources[0].sample_ids(), c.sources[0].sample_ids());
    }

    #[test]
    fn infeasible_plans() {
        let s = samples(100);
        assert!(partition(&s, &PartitionPlan::even(2, 50, 1, 1, 0)).is_err());
        assert!(partition(&s, &PartitionPlan::even(0, 10, 1, 1, 0)).is_err());
        assert!(partition(&s, &PartitionPlan::even(2, 0, 1, 1, 0)).is_err());
        assert!(partition(&s, &PartitionPlan::even(2, 10, 0, 1, 0)).is_err());
    }

    #[test]
    fn label_skew_favors_two_classes() {
        let s = samples(2000);
        let plan = PartitionPlan {
            skew: Skew::Label {
                fraction: 0.8,
                classes: 10,
            },
            ..PartitionPlan::even(5, 100, 10, 10, 2)
        };
        let p = partition(&s, &plan).unwrap();
        for (i, shard) in p.sources.iter().enumerate() {
            let favored = shard
                .labels()
                .iter()
                .filter(|&&y| y == (2 * i) % 10 || y == (2 * i + 1) % 10)
                .count();
            assert!(favored >= 80, "client {i}: {favored}");
        }
    }
}
