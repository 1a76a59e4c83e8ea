//! Circular sliding-window patient-level cross-validation.
//!
//! Fold `r` takes `window` consecutive patients (in manifest order, wrapping
//! around) starting at `window * r` as the test set, the next `window` as
//! the validation set, and everyone else for training.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_index: usize,
    pub test_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub train_ids: Vec<String>,
}

impl FoldSpec {
    pub fn is_train(&self, patient: &str) -> bool {
        self.train_ids.iter().any(|p| p == patient)
    }
}

pub fn make_folds(ordering: &[String], n_folds: usize, window: usize) -> Result<Vec<FoldSpec>> {
    let n = ordering.len();
    if window == 0 || n_folds == 0 {
        return Err(Error::Config("n_folds and window must be positive".into()));
    }
    if n < 2 * window {
        return Err(Error::Config(format!("{n} patients cannot fill test and validation windows of {window}")));
    }
    if ordering.iter().collect::<BTreeSet<_>>().len() != n {
        return Err(Error::Config("patient ordering contains duplicate ids".into()));
    }
    Ok((0..n_folds)
        .map(|r| {
            let idx = |k: usize| (window * r + k) % n;
            let test: BTreeSet<usize> = (0..window).map(idx).collect();
            let val: BTreeSet<usize> = (window..2 * window).map(idx).collect();
            let pick = |ks: &mut dyn Iterator<Item = usize>| ks.map(|k| ordering[k].clone()).collect::<Vec<_>>();
            FoldSpec {
                fold_index: r,
                test_ids: pick(&mut (0..window).map(idx)),
                val_ids: pick(&mut (window..2 * window).map(idx)),
                train_ids: pick(&mut (0..n).filter(|k| !test.contains(k) && !val.contains(k))),
            }
        })
        .collect())
}

/// True iff the fold's three sets are pairwise disjoint, free of
/// duplicates, and together cover exactly `ordering`.
pub fn check_disjoint(f: &FoldSpec, ordering: &[String]) -> bool {
    let all: Vec<&String> = f.test_ids.iter().chain(&f.val_ids).chain(&f.train_ids).collect();
    let set: BTreeSet<&String> = all.iter().copied().collect();
    let expected: BTreeSet<&String> = ordering.iter().collect();
    set.len() == all.len() && set == expected
}

/// Audit export: `{"folds": [{"fold": r, "test": [...], "val": [...], "train": [...]}, ...]}`.
pub fn folds_to_json(folds: &[FoldSpec]) -> String {
    let rows: Vec<_> = folds
        .iter()
        .map(|f| serde_json::json!({"fold": f.fold_index, "test": f.test_ids, "val": f.val_ids, "train": f.train_ids}))
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "folds": rows })).expect("fold table serializes")
}
