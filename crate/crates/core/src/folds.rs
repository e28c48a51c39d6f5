//! Multilabel stratified k-fold assignment by iterative stratification.
//!
//! The rarest remaining label is handled first; each of its samples goes to
//! the fold that still wants the most positives of that label. Ties go to the
//! fold with the most free capacity, then to the earliest fold in a seeded
//! permutation. Samples without any label fill remaining capacity.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Pattern, PatternVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FoldError {
    #[error("cannot split {samples} samples into {k} folds")]
    TooFewSamples { samples: usize, k: usize },
    #[error("fold count must be >= 2, got {0}")]
    BadK(usize),
    #[error("image {0:?} has no labels")]
    UnknownImage(String),
    #[error("fold index {fold} for image {image:?} is outside [0, {k})")]
    FoldOutOfRange { image: String, fold: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    k: usize,
    assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn new(k: usize, assignment: BTreeMap<String, usize>) -> Result<Self, FoldError> {
        if k < 1 {
            return Err(FoldError::BadK(k));
        }
        if let Some((image, &fold)) = assignment.iter().find(|(_, &f)| f >= k) {
            return Err(FoldError::FoldOutOfRange {
                image: image.clone(),
                fold,
                k,
            });
        }
        Ok(FoldAssignment { k, assignment })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> &BTreeMap<String, usize> {
        &self.assignment
    }

    pub fn fold_of(&self, image: &str) -> Option<usize> {
        self.assignment.get(image).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn members(&self, fold: usize) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
    }
}

struct State {
    capacity: Vec<f64>,
    demand: Vec<[f64; 7]>,
    rank: Vec<usize>,
    assigned: Vec<Option<usize>>,
    history: Vec<usize>,
}

impl State {
    fn best_fold(&self, label: Option<usize>) -> usize {
        let key = |j: usize| {
            let d = label.map_or(0.0, |l| self.demand[j][l]);
            (d, self.capacity[j])
        };
        (0..self.capacity.len())
            .reduce(|best, j| {
                let (kb, kj) = (key(best), key(j));
                let better = kj.0 > kb.0
                    || (kj.0 == kb.0 && kj.1 > kb.1)
                    || (kj.0 == kb.0 && kj.1 == kb.1 && self.rank[j] < self.rank[best]);
                if better {
                    j
                } else {
                    best
                }
            })
            .expect("k >= 2")
    }

    fn assign(&mut self, sample: usize, fold: usize, labels: &PatternVector) {
        self.assigned[sample] = Some(fold);
        self.history.push(sample);
        self.capacity[fold] -= 1.0;
        for p in labels.present() {
            self.demand[fold][p.index()] -= 1.0;
        }
    }
}

pub fn stratified_kfold(
    labels: &BTreeMap<String, PatternVector>,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, FoldError> {
    if k < 2 {
        return Err(FoldError::BadK(k));
    }
    let n = labels.len();
    if n < k {
        return Err(FoldError::TooFewSamples { samples: n, k });
    }
    let ids: Vec<&String> = labels.keys().collect();
    let vecs: Vec<PatternVector> = labels.values().copied().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut fold_perm: Vec<usize> = (0..k).collect();
    fold_perm.shuffle(&mut rng);
    let mut rank = vec![0; k];
    for (pos, &j) in fold_perm.iter().enumerate() {
        rank[j] = pos;
    }

    let share = 1.0 / k as f64;
    let mut totals = [0.0f64; 7];
    for v in &vecs {
        for p in v.present() {
            totals[p.index()] += 1.0;
        }
    }
    let mut st = State {
        capacity: vec![n as f64 * share; k],
        demand: vec![totals.map(|t| t * share); k],
        rank,
        assigned: vec![None; n],
        history: Vec::with_capacity(n),
    };

    loop {
        let mut remaining = [0usize; 7];
        for &s in &order {
            if st.assigned[s].is_none() {
                for p in vecs[s].present() {
                    remaining[p.index()] += 1;
                }
            }
        }
        let rarest = (0..Pattern::COUNT)
            .filter(|&l| remaining[l] > 0)
            .min_by_key(|&l| (remaining[l], l));
        let Some(label) = rarest else { break };
        for &s in &order {
            if st.assigned[s].is_none() && vecs[s].bits()[label] {
                let fold = st.best_fold(Some(label));
                st.assign(s, fold, &vecs[s]);
            }
        }
    }
    for &s in &order {
        if st.assigned[s].is_none() {
            let fold = st.best_fold(None);
            st.assign(s, fold, &vecs[s]);
        }
    }

    // every fold gets at least one sample
    let mut sizes = vec![0usize; k];
    for a in st.assigned.iter().flatten() {
        sizes[*a] += 1;
    }
    while let Some(empty) = sizes.iter().position(|&c| c == 0) {
        let largest = (0..k).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).unwrap();
        let s = *st
            .history
            .iter()
            .rev()
            .find(|&&s| st.assigned[s] == Some(largest))
            .unwrap();
        st.assigned[s] = Some(empty);
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }

    let assignment = ids
        .into_iter()
        .zip(&st.assigned)
        .map(|(id, f)| (id.clone(), f.expect("all samples assigned")))
        .collect();
    Ok(FoldAssignment { k, assignment })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldBalance {
    pub fold: usize,
    pub size: usize,
    pub positives: [usize; 7],
    /// `None` for an empty fold.
    pub proportions: [Option<f64>; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub k: usize,
    pub samples: usize,
    pub global_positives: [usize; 7],
    pub global_prevalence: [f64; 7],
    pub folds: Vec<FoldBalance>,
    /// Per pattern, largest |fold prevalence - global prevalence|.
    pub max_deviation_per_pattern: [f64; 7],
    pub max_deviation: f64,
}

pub fn fold_balance_report(
    fa: &FoldAssignment,
    labels: &BTreeMap<String, PatternVector>,
) -> Result<BalanceReport, FoldError> {
    let mut sizes = vec![0usize; fa.k];
    let mut positives = vec![[0usize; 7]; fa.k];
    let mut global = [0usize; 7];
    for (image, &fold) in &fa.assignment {
        let v = labels
            .get(image)
            .ok_or_else(|| FoldError::UnknownImage(image.clone()))?;
        sizes[fold] += 1;
        for p in v.present() {
            positives[fold][p.index()] += 1;
            global[p.index()] += 1;
        }
    }
    let n = fa.assignment.len();
    let global_prevalence = global.map(|g| if n == 0 { 0.0 } else { g as f64 / n as f64 });
    let mut max_dev = [0.0f64; 7];
    let folds = (0..fa.k)
        .map(|f| {
            let proportions = positives[f].map(|c| {
                (sizes[f] > 0).then(|| c as f64 / sizes[f] as f64)
            });
            for (l, prop) in proportions.iter().enumerate() {
                if let Some(prop) = prop {
                    max_dev[l] = max_dev[l].max((prop - global_prevalence[l]).abs());
                }
            }
            FoldBalance {
                fold: f,
                size: sizes[f],
                positives: positives[f],
                proportions,
            }
        })
        .collect();
    Ok(BalanceReport {
        k: fa.k,
        samples: n,
        global_positives: global,
        global_prevalence,
        folds,
        max_deviation_per_pattern: max_dev,
        max_deviation: max_dev.iter().copied().fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_from(vs: &[PatternVector]) -> BTreeMap<String, PatternVector> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| (format!("img{i:03}"), *v))
            .collect()
    }

    #[test]
    fn uniform_labels_split_evenly() {
        let v = "0101000".parse().unwrap();
        let labels = labels_from(&[v; 10]);
        let fa = stratified_kfold(&labels, 5, 1).unwrap();
        assert_eq!(fa.fold_sizes(), vec![2; 5]);
    }

    #[test]
    fn twenty_percent_prevalence() {
        let on = PatternVector::EMPTY.with(Pattern::OvoidNests, true);
        let vs: Vec<PatternVector> = (0..100)
            .map(|i| if i % 5 == 0 { on } else { PatternVector::EMPTY })
            .collect();
        let labels = labels_from(&vs);
        let fa = stratified_kfold(&labels, 5, 42).unwrap();
        let report = fold_balance_report(&fa, &labels).unwrap();
        for f in &report.folds {
            let pos = f.positives[Pattern::OvoidNests.index()];
            assert!((3..=5).contains(&pos), "fold {} has {pos}", f.fold);
        }
        assert!(report.max_deviation <= 0.05);
    }

    #[test]
    fn too_few_samples() {
        let labels = labels_from(&[PatternVector::EMPTY; 3]);
        assert_eq!(
            stratified_kfold(&labels, 5, 0),
            Err(FoldError::TooFewSamples { samples: 3, k: 5 })
        );
        assert_eq!(stratified_kfold(&labels, 1, 0), Err(FoldError::BadK(1)));
    }

    #[test]
    fn one_image_per_fold() {
        let vs: Vec<PatternVector> = (0..6u8).map(|m| PatternVector::from_mask(m * 17)).collect();
        let labels = labels_from(&vs);
        let fa = stratified_kfold(&labels, 6, 3).unwrap();
        assert_eq!(fa.fold_sizes(), vec![1; 6]);
        let report = fold_balance_report(&fa, &labels).unwrap();
        for f in &report.folds {
            for p in f.proportions {
                let p = p.unwrap();
                assert!(p == 0.0 || p == 1.0);
            }
        }
    }

    #[test]
    fn unknown_image_in_report() {
        let labels = labels_from(&[PatternVector::EMPTY; 4]);
        let fa = stratified_kfold(&labels, 2, 0).unwrap();
        let mut fewer = labels.clone();
        fewer.remove("img000");
        assert_eq!(
            fold_balance_report(&fa, &fewer),
            Err(FoldError::UnknownImage("img000".into()))
        );
    }

    #[test]
    fn perfect_split_has_zero_deviation() {
        let pn = PatternVector::EMPTY.with(Pattern::PigmentNetwork, true);
        let labels = labels_from(&[pn, PatternVector::EMPTY, pn, PatternVector::EMPTY]);
        let fa = FoldAssignment::new(
            2,
            BTreeMap::from([
                ("img000".into(), 0),
                ("img001".into(), 0),
                ("img002".into(), 1),
                ("img003".into(), 1),
            ]),
        )
        .unwrap();
        assert_eq!(fold_balance_report(&fa, &labels).unwrap().max_deviation, 0.0);
    }
}
