//! Subject-disjoint cross-validation folds.

use crate::error::Error;
use crate::Result;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;

/// Assignment of every subject to exactly one of K folds. A split holds
/// out one fold's subjects for testing and trains on all others, so no
/// subject ever appears on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    k: usize,
    assignments: Vec<(String, usize)>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignments(&self) -> &[(String, usize)] {
        &self.assignments
    }

    pub fn subjects_in(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, f)| *f == fold)
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// (train subjects, test subjects) for one held-out fold.
    pub fn split(&self, fold: usize) -> (Vec<String>, Vec<String>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (subject, f) in &self.assignments {
            if *f == fold {
                test.push(subject.clone());
            } else {
                train.push(subject.clone());
            }
        }
        (train, test)
    }
}

/// Shuffle the subjects and deal them round-robin into K folds, so fold
/// sizes differ by at most one. Deterministic given the rng state.
pub fn make_folds(subjects: &[String], k: usize, rng: &mut StdRng) -> Result<FoldPlan> {
    if k == 0 || k > subjects.len() {
        return Err(Error::Config {
            problems: vec![format!(
                "k = {k} must be between 1 and the number of subjects ({})",
                subjects.len()
            )],
        });
    }
    let mut unique = std::collections::HashSet::new();
    for s in subjects {
        if !unique.insert(s) {
            return Err(Error::Bookkeeping {
                reason: format!("duplicate subject '{s}'"),
            });
        }
    }
    let mut shuffled: Vec<String> = subjects.to_vec();
    shuffled.shuffle(rng);
    let assignments = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % k))
        .collect();
    Ok(FoldPlan { k, assignments })
}
