//! Subject roles and within-subject stratified cross-validation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SubjectEpochs;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub n_pretrain: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_folds: usize,
    /// Share of each fold's non-test examples held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { n_pretrain: 40, n_validation: 7, n_test: 7, n_folds: 5, validation_fraction: 0.2 }
    }
}

/// Indices into one subject's epoch list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub pretrain_subjects: Vec<String>,
    pub validation_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    /// Folds of every test subject.
    pub folds: BTreeMap<String, Vec<Fold>>,
}

fn by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        out.entry(l).or_default().push(i);
    }
    out
}

fn stratified_folds(subject: &str, labels: &[usize], config: &SplitConfig, rng: &mut impl Rng) -> Result<Vec<Fold>> {
    let k = config.n_folds;
    let classes = by_class(labels);
    if let Some((class, idx)) = classes.iter().find(|(_, idx)| idx.len() < k) {
        return Err(Error::Split(format!(
            "subject {subject}: class {class} has {} examples, fewer than {k} folds",
            idx.len()
        )));
    }
    // Round-robin assignment continuing across classes keeps fold sizes level.
    let mut assignment = vec![0usize; labels.len()];
    let mut cursor = 0;
    for idx in classes.values() {
        let mut idx = idx.clone();
        idx.shuffle(rng);
        for i in idx {
            assignment[i] = cursor % k;
            cursor += 1;
        }
    }
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let test: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] == f).collect();
        let mut validation = Vec::new();
        for idx in classes.values() {
            let mut rest: Vec<usize> = idx.iter().copied().filter(|&i| assignment[i] != f).collect();
            rest.shuffle(rng);
            let take = (rest.len() as f64 * config.validation_fraction).round() as usize;
            validation.extend_from_slice(&rest[..take.min(rest.len())]);
        }
        validation.sort_unstable();
        let train = (0..labels.len())
            .filter(|&i| assignment[i] != f && validation.binary_search(&i).is_err())
            .collect();
        folds.push(Fold { train, validation, test });
    }
    Ok(folds)
}

/// Assign subjects to pre-training, validation and test roles in the order
/// given, and build stratified folds for every test subject.
pub fn make_splits(subjects: &[SubjectEpochs], config: &SplitConfig, rng: &mut impl Rng) -> Result<SplitPlan> {
    if config.n_folds < 2 {
        return Err(Error::Config(format!("{} folds; at least 2 are required", config.n_folds)));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::Config(format!("validation fraction {} outside [0, 1)", config.validation_fraction)));
    }
    let needed = config.n_pretrain + config.n_validation + config.n_test;
    if needed > subjects.len() {
        return Err(Error::Split(format!("{needed} subjects requested, {} available", subjects.len())));
    }
    let names: Vec<String> = subjects.iter().map(|s| s.subject.clone()).collect();
    let (pre, rest) = names.split_at(config.n_pretrain);
    let (val, rest) = rest.split_at(config.n_validation);
    let test = &rest[..config.n_test];
    let mut folds = BTreeMap::new();
    for s in &subjects[config.n_pretrain + config.n_validation..needed] {
        let labels = s.labels()?;
        folds.insert(s.subject.clone(), stratified_folds(&s.subject, &labels, config, rng)?);
    }
    Ok(SplitPlan {
        pretrain_subjects: pre.to_vec(),
        validation_subjects: val.to_vec(),
        test_subjects: test.to_vec(),
        folds,
    })
}
