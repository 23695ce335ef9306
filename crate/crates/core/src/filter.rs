//! Confidence-gated relabeling over the expanded label space.
//!
//! The classifier predicts over 6(N+1) labels: six main expression classes
//! at indices 0..6, then for each expression a block of N subclass slots at
//! 6 + e*N .. 6 + (e+1)*N. During training, a sample whose top predicted
//! probability exceeds the probability of its current label by more than a
//! threshold is moved to the best-scoring label *within its annotated
//! expression's group* — so a suspect sample can drift between its main
//! class and that class's subclasses, but never to another expression.
//! At evaluation time subclasses are merged back onto their main class.

use crate::error::Error;
use crate::Result;

pub use crate::encoder::NUM_EXPRESSIONS;

/// Tolerance for the "probabilities sum to one" check.
const NORMALIZATION_TOL: f64 = 1e-6;

/// Per-sample label bookkeeping across training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelState {
    pub sample_id: String,
    /// The annotated main class, 0..6. Never changes.
    pub original_main: usize,
    /// The label currently used as the training target, in [0, 6(N+1)).
    pub current_label: usize,
    /// Every applied change as (epoch, old, new).
    pub relabel_history: Vec<(usize, usize, usize)>,
}

impl LabelState {
    pub fn new(sample_id: impl Into<String>, original_main: usize) -> Result<Self> {
        if original_main >= NUM_EXPRESSIONS {
            return Err(Error::LabelOutOfRange {
                label: original_main,
                limit: NUM_EXPRESSIONS,
            });
        }
        Ok(LabelState {
            sample_id: sample_id.into(),
            original_main,
            current_label: original_main,
            relabel_history: Vec::new(),
        })
    }
}

/// One applied relabel, with the probabilities that triggered it, for the
/// audit log.
#[derive(Debug, Clone, PartialEq)]
pub struct RelabelEvent {
    pub sample_id: String,
    pub epoch: usize,
    pub old_label: usize,
    pub new_label: usize,
    pub p_max: f64,
    pub p_gt: f64,
}

impl RelabelEvent {
    /// Tab-separated line matching the header written by the training run:
    /// epoch, sample, old, new, p_max, p_gt.
    pub fn audit_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            self.epoch, self.sample_id, self.old_label, self.new_label, self.p_max, self.p_gt
        )
    }
}

/// Total number of labels for a given subclass count.
pub fn label_space(num_subclasses: usize) -> usize {
    NUM_EXPRESSIONS * (num_subclasses + 1)
}

fn subclasses_from_len(len: usize) -> Result<usize> {
    if len < NUM_EXPRESSIONS || len % NUM_EXPRESSIONS != 0 {
        return Err(Error::Bookkeeping {
            reason: format!("vector length {len} is not 6*(N+1) for any N"),
        });
    }
    Ok(len / NUM_EXPRESSIONS - 1)
}

/// Main class of any label: identity below 6, block index above.
pub fn group_of(label: usize, num_subclasses: usize) -> Result<usize> {
    if label >= label_space(num_subclasses) {
        return Err(Error::LabelOutOfRange {
            label,
            limit: label_space(num_subclasses),
        });
    }
    if label < NUM_EXPRESSIONS {
        Ok(label)
    } else {
        Ok((label - NUM_EXPRESSIONS) / num_subclasses)
    }
}

/// The labels an expression's samples may carry: the main class plus its
/// subclass block.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndex {
    pub expression: usize,
    pub members: Vec<usize>,
}

impl GroupIndex {
    pub fn new(expression: usize, num_subclasses: usize) -> Result<Self> {
        if expression >= NUM_EXPRESSIONS {
            return Err(Error::LabelOutOfRange {
                label: expression,
                limit: NUM_EXPRESSIONS,
            });
        }
        let mut members = vec![expression];
        let base = NUM_EXPRESSIONS + expression * num_subclasses;
        members.extend(base..base + num_subclasses);
        Ok(GroupIndex { expression, members })
    }
}

fn validate_probs(probs: &[f64]) -> Result<usize> {
    let n = subclasses_from_len(probs.len())?;
    if !probs.iter().all(|p| p.is_finite() && *p >= 0.0) {
        return Err(Error::NonFinite {
            context: "probability vector has a negative or non-finite entry".into(),
        });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NonFinite {
            context: format!("probability vector sums to {sum}, not 1"),
        });
    }
    Ok(n)
}

struct Decision {
    new_label: usize,
    p_max: f64,
    p_gt: f64,
}

fn decide(probs: &[f64], state: &LabelState, delta: f64) -> Result<Decision> {
    let n = validate_probs(probs)?;
    if state.current_label >= probs.len() {
        return Err(Error::LabelOutOfRange {
            label: state.current_label,
            limit: probs.len(),
        });
    }
    if group_of(state.current_label, n)? != state.original_main {
        return Err(Error::Bookkeeping {
            reason: format!(
                "sample {}: current label {} lies outside expression {}'s group",
                state.sample_id, state.current_label, state.original_main
            ),
        });
    }

    let p_max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p_gt = probs[state.current_label];
    let keep = Decision {
        new_label: state.current_label,
        p_max,
        p_gt,
    };
    if p_max - p_gt <= delta {
        return Ok(keep);
    }

    let members = GroupIndex::new(state.original_main, n)?.members;
    if members.len() < 2 {
        // No subclasses exist, so there is nowhere to move within the group.
        return Ok(keep);
    }
    // Top two inside the group; strict > keeps the lowest index on ties.
    let mut l_max1 = members[0];
    for &m in &members[1..] {
        if probs[m] > probs[l_max1] {
            l_max1 = m;
        }
    }
    let mut l_max2 = None;
    for &m in &members {
        if m == l_max1 {
            continue;
        }
        if l_max2.map_or(true, |s: usize| probs[m] > probs[s]) {
            l_max2 = Some(m);
        }
    }
    let new_label = if l_max1 != state.current_label {
        l_max1
    } else {
        l_max2.expect("group has at least two members")
    };
    Ok(Decision {
        new_label,
        p_max,
        p_gt,
    })
}

/// The relabeling rule: returns the label the sample should carry next,
/// which is its current label unless the confidence gap exceeds `delta`.
pub fn relabel(probs: &[f64], state: &LabelState, delta: f64) -> Result<usize> {
    Ok(decide(probs, state, delta)?.new_label)
}

/// Apply the relabeling rule to a whole training set after one epoch.
///
/// Does nothing (and reports no events) before `start_epoch`. Afterwards
/// each state is updated in place from its most recent predicted
/// probabilities, and every change is recorded both in the state's history
/// and in the returned event list.
pub fn apply_filter_epoch(
    states: &mut [LabelState],
    probs: &[Vec<f64>],
    delta: f64,
    epoch: usize,
    start_epoch: usize,
) -> Result<Vec<RelabelEvent>> {
    if epoch == 0 {
        return Err(Error::Bookkeeping {
            reason: "epochs are counted from 1".into(),
        });
    }
    if epoch < start_epoch {
        return Ok(Vec::new());
    }
    if probs.len() != states.len() {
        return Err(Error::Bookkeeping {
            reason: format!(
                "have probabilities for {} samples but {} label states",
                probs.len(),
                states.len()
            ),
        });
    }
    let mut events = Vec::new();
    for (state, p) in states.iter_mut().zip(probs) {
        let decision = decide(p, state, delta)?;
        if decision.new_label != state.current_label {
            events.push(RelabelEvent {
                sample_id: state.sample_id.clone(),
                epoch,
                old_label: state.current_label,
                new_label: decision.new_label,
                p_max: decision.p_max,
                p_gt: decision.p_gt,
            });
            state
                .relabel_history
                .push((epoch, state.current_label, decision.new_label));
            state.current_label = decision.new_label;
        }
    }
    Ok(events)
}

/// Evaluation-time prediction: argmax over the full label space (ties
/// toward the lowest index), then merged onto the main class.
pub fn merge_predictions(logits: &[f64], num_subclasses: usize) -> Result<usize> {
    if logits.len() != label_space(num_subclasses) {
        return Err(Error::Bookkeeping {
            reason: format!(
                "got {} logits for a {}-label space",
                logits.len(),
                label_space(num_subclasses)
            ),
        });
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    group_of(best, num_subclasses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn state(original: usize, current: usize) -> LabelState {
        let mut s = LabelState::new("s", original).unwrap();
        s.current_label = current;
        s
    }

    fn random_probs(rng: &mut StdRng, len: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..len).map(|_| rng.gen_range(1e-3..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|v| v / sum).collect()
    }

    #[test]
    fn group_of_matches_layout() {
        assert_eq!(group_of(3, 5).unwrap(), 3);
        assert_eq!(group_of(6, 5).unwrap(), 0);
        assert_eq!(group_of(35, 5).unwrap(), 5);
        assert_eq!(group_of(8, 1).unwrap(), 2);
        assert!(group_of(36, 5).is_err());
        assert!(group_of(6, 0).is_err());
    }

    #[test]
    fn groups_partition_the_label_space() {
        for n in [0, 1, 2, 5] {
            let mut seen = vec![0usize; label_space(n)];
            for e in 0..NUM_EXPRESSIONS {
                let group = GroupIndex::new(e, n).unwrap();
                assert_eq!(group.members.len(), n + 1);
                for &m in &group.members {
                    seen[m] += 1;
                    assert_eq!(group_of(m, n).unwrap(), e);
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "n={n} not a partition");
        }
    }

    #[test]
    fn uniform_probabilities_never_trigger() {
        let probs = vec![1.0 / 12.0; 12];
        let s = state(2, 2);
        assert_eq!(relabel(&probs, &s, 0.4).unwrap(), 2);
    }

    #[test]
    fn worked_example_moves_to_subclass_then_back() {
        // gap 0.60 - 0.10 = 0.50 > 0.4; within group {2, 8} the best is the
        // current label 2, so the sample moves to the runner-up 8.
        let probs = vec![
            0.05, 0.05, 0.10, 0.05, 0.60, 0.05, 0.01, 0.01, 0.02, 0.01, 0.04, 0.01,
        ];
        assert_eq!(relabel(&probs, &state(2, 2), 0.4).unwrap(), 8);
        // from the subclass the within-group best (index 2) differs from the
        // current label, so the sample returns to the main class
        assert_eq!(relabel(&probs, &state(2, 8), 0.4).unwrap(), 2);
    }

    #[test]
    fn relabel_validates_its_inputs() {
        let s = state(0, 0);
        // not normalized
        assert!(relabel(&vec![0.5; 12], &s, 0.4).is_err());
        // negative entry
        let mut probs = vec![1.0 / 12.0; 12];
        probs[0] = -probs[0];
        probs[1] += 2.0 / 12.0;
        assert!(relabel(&probs, &s, 0.4).is_err());
        // NaN entry
        let mut probs = vec![1.0 / 12.0; 12];
        probs[3] = f64::NAN;
        assert!(relabel(&probs, &s, 0.4).is_err());
        // length not 6*(N+1)
        assert!(relabel(&vec![0.1; 10], &s, 0.4).is_err());
        // current label outside the vector
        assert!(relabel(&vec![1.0 / 12.0; 12], &state(0, 14), 0.4).is_err());
        // current label in the wrong group
        assert!(relabel(&vec![1.0 / 12.0; 12], &state(0, 9), 0.4).is_err());
    }

    #[test]
    fn no_subclasses_means_no_relabels() {
        // N = 0: the group is the main class alone, so even a huge gap has
        // nowhere to move the sample.
        let mut probs = vec![0.0; 6];
        probs[4] = 0.9;
        probs[1] = 0.1;
        assert_eq!(relabel(&probs, &state(1, 1), 0.1).unwrap(), 1);
    }

    #[test]
    fn returned_label_differs_from_current_when_triggered() {
        let mut rng = StdRng::seed_from_u64(40);
        for _ in 0..500 {
            let n = rng.gen_range(1..=5usize);
            let probs = random_probs(&mut rng, label_space(n));
            let original = rng.gen_range(0..NUM_EXPRESSIONS);
            let members = GroupIndex::new(original, n).unwrap().members;
            let current = members[rng.gen_range(0..members.len())];
            let s = state(original, current);
            let p_max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let delta = 0.05;
            let new = relabel(&probs, &s, delta).unwrap();
            if p_max - probs[current] > delta {
                assert_ne!(new, current);
            } else {
                assert_eq!(new, current);
            }
        }
    }

    #[test]
    fn large_threshold_never_fires() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..200 {
            let probs = random_probs(&mut rng, 12);
            let s = state(3, 3);
            assert_eq!(relabel(&probs, &s, 1.0).unwrap(), 3);
        }
    }

    #[test]
    fn epoch_gating_and_history() {
        let probs = vec![vec![
            0.05, 0.05, 0.10, 0.05, 0.60, 0.05, 0.01, 0.01, 0.02, 0.01, 0.04, 0.01,
        ]];
        let mut states = vec![LabelState::new("a", 2).unwrap()];

        // before the start epoch nothing happens
        let events = apply_filter_epoch(&mut states, &probs, 0.4, 3, 5).unwrap();
        assert!(events.is_empty());
        assert_eq!(states[0].current_label, 2);

        // at the start epoch the worked example fires
        let events = apply_filter_epoch(&mut states, &probs, 0.4, 5, 5).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(states[0].current_label, 8);
        assert_eq!(states[0].relabel_history, vec![(5, 2, 8)]);
        assert_eq!(events[0].audit_line(), "5\ta\t2\t8\t0.600000\t0.100000");

        // next epoch it returns to the main class and both moves are kept
        let events = apply_filter_epoch(&mut states, &probs, 0.4, 6, 5).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(states[0].current_label, 2);
        assert_eq!(states[0].relabel_history, vec![(5, 2, 8), (6, 8, 2)]);
    }

    #[test]
    fn epoch_bookkeeping_errors() {
        let mut states = vec![LabelState::new("a", 0).unwrap()];
        assert!(apply_filter_epoch(&mut states, &[], 0.4, 0, 1).is_err());
        assert!(apply_filter_epoch(&mut states, &[], 0.4, 2, 1).is_err());
    }

    #[test]
    fn batch_filter_matches_per_sample_oracle() {
        let mut rng = StdRng::seed_from_u64(42);
        let n = 2;
        let mut states: Vec<LabelState> = (0..50)
            .map(|i| LabelState::new(format!("s{i}"), i % NUM_EXPRESSIONS).unwrap())
            .collect();
        let probs: Vec<Vec<f64>> = (0..50)
            .map(|_| random_probs(&mut rng, label_space(n)))
            .collect();

        // oracle: evaluate the published rule independently per sample
        let mut expected = 0;
        for (s, p) in states.iter().zip(&probs) {
            let p_max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if p_max - p[s.current_label] > 0.05 {
                expected += 1;
            }
        }
        let events = apply_filter_epoch(&mut states, &probs, 0.05, 10, 1).unwrap();
        assert_eq!(events.len(), expected);
        for s in &states {
            assert_eq!(group_of(s.current_label, n).unwrap(), s.original_main);
        }
    }

    #[test]
    fn merge_matches_brute_force_on_random_vectors() {
        let mut rng = StdRng::seed_from_u64(43);
        for _ in 0..1000 {
            let n = rng.gen_range(0..=5usize);
            let logits: Vec<f64> = (0..label_space(n))
                .map(|_| rng.gen_range(-3.0..3.0))
                .collect();
            // brute force: scan for the first index attaining the maximum
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let arg = logits.iter().position(|&v| v == max).unwrap();
            let want = if arg < NUM_EXPRESSIONS {
                arg
            } else {
                (arg - NUM_EXPRESSIONS) / n
            };
            assert_eq!(merge_predictions(&logits, n).unwrap(), want);
        }
    }

    #[test]
    fn merge_covers_layout_and_ties() {
        // one-hot at every subclass slot maps back to its expression
        let n = 5;
        for e in 0..NUM_EXPRESSIONS {
            for k in 0..n {
                let mut logits = vec![0.0; label_space(n)];
                logits[NUM_EXPRESSIONS + e * n + k] = 1.0;
                assert_eq!(merge_predictions(&logits, n).unwrap(), e);
            }
        }
        // N = 0 is a plain argmax
        assert_eq!(merge_predictions(&[0.0, 2.0, 1.0, 0.0, 0.0, 0.0], 0).unwrap(), 1);
        // ties break toward the lowest index
        assert_eq!(merge_predictions(&vec![0.0; 36], 5).unwrap(), 0);
        let mut logits = vec![0.0; 36];
        logits[9] = 7.0;
        logits[20] = 7.0;
        assert_eq!(merge_predictions(&logits, 5).unwrap(), 0);
        // wrong length is a bookkeeping error
        assert!(merge_predictions(&[0.0; 12], 5).is_err());
    }

    #[test]
    fn accuracy_is_identical_under_pre_merged_scoring() {
        let mut rng = StdRng::seed_from_u64(44);
        let n = 3;
        let mut merged_hits = 0;
        let mut mapped_hits = 0;
        let total = 400;
        for _ in 0..total {
            let logits: Vec<f64> = (0..label_space(n))
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            let truth = rng.gen_range(0..NUM_EXPRESSIONS);
            let merged = merge_predictions(&logits, n).unwrap();
            if merged == truth {
                merged_hits += 1;
            }
            // map prediction and truth through group_of separately
            let mut arg = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[arg] {
                    arg = i;
                }
            }
            if group_of(arg, n).unwrap() == group_of(truth, n).unwrap() {
                mapped_hits += 1;
            }
        }
        assert_eq!(merged_hits, mapped_hits);
    }

    proptest! {
        #[test]
        fn group_closure_under_repeated_relabeling(
            seed in 0u64..1000,
            original in 0usize..NUM_EXPRESSIONS,
            n in 1usize..=5,
            steps in 1usize..20,
            delta in 0.01f64..0.9,
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut s = LabelState::new("p", original).unwrap();
            for epoch in 1..=steps {
                let probs = random_probs(&mut rng, label_space(n));
                let new = relabel(&probs, &s, delta).unwrap();
                if new != s.current_label {
                    s.relabel_history.push((epoch, s.current_label, new));
                    s.current_label = new;
                }
                prop_assert_eq!(group_of(s.current_label, n).unwrap(), original);
            }
        }

        #[test]
        fn trigger_is_monotone_in_the_threshold(
            seed in 0u64..1000,
            n in 1usize..=5,
            delta in 0.05f64..0.9,
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let probs = random_probs(&mut rng, label_space(n));
            let original = rng.gen_range(0..NUM_EXPRESSIONS);
            let s = LabelState::new("p", original).unwrap();
            let fired = relabel(&probs, &s, delta).unwrap() != s.current_label;
            if fired {
                // every smaller threshold must also fire
                for k in 1..=4 {
                    let smaller = delta * k as f64 / 5.0;
                    prop_assert_ne!(relabel(&probs, &s, smaller).unwrap(), s.current_label);
                }
            }
        }
    }
}
