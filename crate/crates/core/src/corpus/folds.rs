use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 5;

/// Assignment of every problem to one of five folds; fold 0 tunes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_of: BTreeMap<String, usize>,
    pub tuning_fold: usize,
    pub seed: u64,
}

impl FoldPlan {
    /// Indices (into `corpus.problems`) that belong to `fold`.
    pub fn indices(&self, corpus: &Corpus, fold: usize) -> Vec<usize> {
        self.indices_where(corpus, |f| f == fold)
    }

    pub fn indices_where(&self, corpus: &Corpus, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        corpus
            .problems
            .iter()
            .enumerate()
            .filter(|(_, p)| self.fold_of.get(&p.id).is_some_and(|&f| keep(f)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn fold_sizes(&self) -> [usize; NUM_FOLDS] {
        let mut sizes = [0; NUM_FOLDS];
        for &f in self.fold_of.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn covers(&self, corpus: &Corpus) -> bool {
        corpus.problems.len() == self.fold_of.len()
            && corpus.problems.iter().all(|p| self.fold_of.contains_key(&p.id))
    }

    pub fn test_folds(&self) -> Vec<usize> {
        (0..NUM_FOLDS).filter(|&f| f != self.tuning_fold).collect()
    }
}

/// Label-stratified five-fold split. Each class is shuffled under `seed`,
/// the classes are laid end to end, and folds are dealt round-robin over
/// that sequence, so both total fold sizes and per-class fold counts differ
/// by at most one.
pub fn make_folds(corpus: &Corpus, seed: u64) -> Result<FoldPlan> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot split an empty corpus into folds"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); corpus.num_classes];
    for (i, p) in corpus.problems.iter().enumerate() {
        by_class[p.difficulty].push(i);
    }
    let mut fold_of = BTreeMap::new();
    let mut slot = 0usize;
    for (class, members) in by_class.iter_mut().enumerate() {
        if !members.is_empty() && members.len() < NUM_FOLDS {
            warn!(
                "class {class} has only {} members; some folds will not contain it",
                members.len()
            );
        }
        members.shuffle(&mut rng);
        for &i in members.iter() {
            fold_of.insert(corpus.problems[i].id.clone(), slot % NUM_FOLDS);
            slot += 1;
        }
    }
    Ok(FoldPlan {
        fold_of,
        tuning_fold: 0,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Problem;
    use proptest::prelude::*;

    fn corpus_with_labels(labels: &[usize], k: usize) -> Corpus {
        let problems = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| Problem {
                id: format!("p{i:05}"),
                statement: "s".into(),
                code: "c".into(),
                time_limit_ms: 0,
                memory_limit_kb: 0,
                io_size_bytes: 0,
                category_tags: vec![],
                difficulty: y,
            })
            .collect();
        Corpus::new(problems, k).unwrap()
    }

    #[test]
    fn table_one_fold_sizes() {
        let labels: Vec<usize> = (0..5302).map(|i| i % 3).collect();
        let plan = make_folds(&corpus_with_labels(&labels, 3), 1).unwrap();
        assert_eq!(plan.fold_sizes(), [1061, 1061, 1060, 1060, 1060]);

        let labels: Vec<usize> = (0..1223).map(|i| (i * 7) % 5).collect();
        let plan = make_folds(&corpus_with_labels(&labels, 5), 1).unwrap();
        assert_eq!(plan.fold_sizes(), [245, 245, 245, 244, 244]);
        assert_eq!(plan.tuning_fold, 0);
    }

    #[test]
    fn same_seed_same_plan() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let c = corpus_with_labels(&labels, 4);
        assert_eq!(make_folds(&c, 9).unwrap(), make_folds(&c, 9).unwrap());
        assert_ne!(make_folds(&c, 9).unwrap(), make_folds(&c, 10).unwrap());
    }

    #[test]
    fn empty_corpus_rejected() {
        let c = Corpus {
            problems: vec![],
            num_classes: 2,
            tag_vocab: vec![],
        };
        assert!(make_folds(&c, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_and_stratify(labels in prop::collection::vec(0usize..4, 1..200), seed in any::<u64>()) {
            let c = corpus_with_labels(&labels, 4);
            let plan = make_folds(&c, seed).unwrap();
            prop_assert!(plan.covers(&c));
            let mut all: Vec<usize> = (0..NUM_FOLDS).flat_map(|f| plan.indices(&c, f)).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());

            let sizes = plan.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for class in 0..4 {
                let per_fold: Vec<usize> = (0..NUM_FOLDS)
                    .map(|f| plan.indices(&c, f).iter().filter(|&&i| labels[i] == class).count())
                    .collect();
                prop_assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1);
            }
        }
    }
}
