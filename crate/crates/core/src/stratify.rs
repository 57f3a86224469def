//! Multilabel stratified K-fold assignment by iterative stratification.
//!
//! Labels are processed rarest-first: for the label with the fewest
//! unassigned positives, each of its unassigned samples goes to the fold that
//! still wants the most positives of that label. Ties go to the fold with the
//! most remaining capacity, then to the lowest fold index. Samples with no
//! positive labels fill the remaining capacity afterwards.
//!
//! The greedy pass only balances a label against samples not yet placed by
//! rarer labels, so frequent co-occurring labels can drift far from their
//! share. A refinement pass then swaps pairs of samples between folds while
//! that strictly lowers the summed squared deviation of per-fold positive
//! counts. Swaps keep fold sizes unchanged.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::manifest::BinaryLabelMatrix;

#[derive(Debug, Error)]
pub enum StratifyError {
    #[error("cannot split {n_samples} samples into {k} folds")]
    DegenerateInput { n_samples: usize, k: usize },
    #[error("fold {fold} out of range for k={k}")]
    FoldOutOfRange { fold: usize, k: usize },
    #[error("fold file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    sample_ids: Vec<String>,
    fold_of: Vec<usize>,
    k: usize,
}

/// Train/validation partition for one fold, as row indices in sample order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitView {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

impl FoldAssignment {
    pub fn new(sample_ids: Vec<String>, fold_of: Vec<usize>, k: usize) -> Result<Self, StratifyError> {
        if sample_ids.len() != fold_of.len() {
            return Err(StratifyError::Format("ids and folds differ in length".into()));
        }
        if let Some(&fold) = fold_of.iter().find(|&&f| f >= k) {
            return Err(StratifyError::FoldOutOfRange { fold, k });
        }
        Ok(Self { sample_ids, fold_of, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn len(&self) -> usize {
        self.fold_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of.is_empty()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }

    /// Sample id → fold lookup.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.sample_ids.iter().map(String::as_str).zip(self.fold_of.iter().copied()).collect()
    }

    pub fn split_views(&self, fold: usize) -> Result<SplitView, StratifyError> {
        if fold >= self.k {
            return Err(StratifyError::FoldOutOfRange { fold, k: self.k });
        }
        let (valid, train): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|&i| self.fold_of[i] == fold);
        Ok(SplitView { train, valid })
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<(), StratifyError> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["sample_id", "fold"])?;
        for (id, fold) in self.sample_ids.iter().zip(&self.fold_of) {
            out.write_record([id.as_str(), fold.to_string().as_str()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StratifyError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// Reads a `sample_id,fold` file; `k` is one past the largest fold index.
    pub fn read_from<R: Read>(reader: R) -> Result<Self, StratifyError> {
        let mut input = csv::Reader::from_reader(reader);
        let headers = input.headers()?;
        if headers.iter().collect::<Vec<_>>() != ["sample_id", "fold"] {
            return Err(StratifyError::Format("header must be `sample_id,fold`".into()));
        }
        let mut ids = Vec::new();
        let mut folds = Vec::new();
        for record in input.records() {
            let record = record?;
            ids.push(record[0].to_owned());
            folds.push(record[1].parse::<usize>().map_err(|e| {
                StratifyError::Format(format!("bad fold `{}`: {e}", &record[1]))
            })?);
        }
        let k = folds.iter().max().map_or(0, |&m| m + 1);
        if k < 2 {
            return Err(StratifyError::Format("fold file must reference at least 2 folds".into()));
        }
        Self::new(ids, folds, k)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StratifyError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Assigns every sample of `labels` to one of `k` folds.
pub fn stratified_kfold(
    labels: &BinaryLabelMatrix,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, StratifyError> {
    let n = labels.n_samples();
    if k < 2 || n < k {
        return Err(StratifyError::DegenerateInput { n_samples: n, k });
    }
    let values = labels.values();
    let n_labels = labels.n_labels();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let share = 1.0 / k as f64;
    let positives = labels.positives();
    // desired[f][l]: positives of label l that fold f still wants.
    let mut desired: Vec<Vec<f64>> =
        vec![positives.iter().map(|&p| p as f64 * share).collect(); k];
    let mut capacity: Vec<f64> = vec![n as f64 * share; k];

    let mut fold_of = vec![usize::MAX; n];
    let mut remaining: Vec<usize> = positives.clone();

    // Rarest label that still has unassigned positives; lowest index on ties.
    while let Some(label) = (0..n_labels).filter(|&l| remaining[l] > 0).min_by_key(|&l| (remaining[l], l)) {
        for &sample in &order {
            if fold_of[sample] != usize::MAX || values[[sample, label]] == 0 {
                continue;
            }
            let fold = best_fold(&desired, &capacity, label);
            fold_of[sample] = fold;
            capacity[fold] -= 1.0;
            for l in 0..n_labels {
                if values[[sample, l]] == 1 {
                    desired[fold][l] -= 1.0;
                    remaining[l] -= 1;
                }
            }
        }
    }

    for &sample in &order {
        if fold_of[sample] == usize::MAX {
            let fold = most_capacity(&capacity);
            fold_of[sample] = fold;
            capacity[fold] -= 1.0;
        }
    }

    refine_by_swaps(labels, &order, &mut fold_of, k);
    FoldAssignment::new(labels.sample_ids().to_vec(), fold_of, k)
}

/// First-improvement local search over single-sample moves and pairwise swaps
/// between folds, until no step lowers
/// `sum_{fold,label} (count - n_pos/k)^2 + sum_fold (size - n/k)^2`.
///
/// Fold size is handled as an extra label every sample carries. Moving labels
/// `a` from fold `f` to `g` changes the objective by
/// `2 * sum_l a_l * (c_gl - c_fl) + 2 * |a|^2`; swapping `a` in `f` for `b` in
/// `g` changes it by `2 * sum_l d_l * (c_fl - c_gl) + 2 * |d|^2` with
/// `d = b - a`. Neither depends on the targets, so the search runs on integers.
fn refine_by_swaps(labels: &BinaryLabelMatrix, order: &[usize], fold_of: &mut [usize], k: usize) {
    let values = labels.values();
    let n_labels = labels.n_labels();
    // Column `n_labels` is the fold size.
    let bit = |s: usize, l: usize| -> i64 { if l == n_labels { 1 } else { i64::from(values[[s, l]]) } };
    let mut counts = vec![vec![0i64; n_labels + 1]; k];
    for (sample, &fold) in fold_of.iter().enumerate() {
        for (l, c) in counts[fold].iter_mut().enumerate() {
            *c += bit(sample, l);
        }
    }

    // One representative sample per distinct label pattern in `fold`.
    let representatives = |fold_of: &[usize], fold: usize| -> Vec<usize> {
        let mut seen = std::collections::HashSet::new();
        order
            .iter()
            .copied()
            .filter(|&s| fold_of[s] == fold && seen.insert(values.row(s)))
            .collect()
    };
    let move_delta = |counts: &[Vec<i64>], s: usize, from: usize, to: usize| -> i64 {
        (0..=n_labels).map(|l| {
            let a = bit(s, l);
            2 * a * (counts[to][l] - counts[from][l]) + 2 * a * a
        }).sum()
    };
    let swap_delta = |counts: &[Vec<i64>], a: usize, f: usize, b: usize, g: usize| -> i64 {
        (0..n_labels).map(|l| {
            let d = bit(b, l) - bit(a, l);
            2 * d * (counts[f][l] - counts[g][l]) + 2 * d * d
        }).sum()
    };
    let apply_move = |counts: &mut [Vec<i64>], fold_of: &mut [usize], s: usize, to: usize| {
        let from = fold_of[s];
        #[allow(clippy::needless_range_loop)]
        for l in 0..=n_labels {
            counts[from][l] -= bit(s, l);
            counts[to][l] += bit(s, l);
        }
        fold_of[s] = to;
    };

    let mut improved = true;
    while improved {
        improved = false;
        for f in 0..k {
            for g in f + 1..k {
                'pair: loop {
                    let reps_f = representatives(fold_of, f);
                    let reps_g = representatives(fold_of, g);
                    for (reps, from, to) in [(&reps_f, f, g), (&reps_g, g, f)] {
                        if counts[from][n_labels] <= 1 {
                            continue;
                        }
                        for &s in reps {
                            if move_delta(&counts, s, from, to) < 0 {
                                apply_move(&mut counts, fold_of, s, to);
                                improved = true;
                                continue 'pair;
                            }
                        }
                    }
                    for &a in &reps_f {
                        for &b in &reps_g {
                            if swap_delta(&counts, a, f, b, g) < 0 {
                                apply_move(&mut counts, fold_of, a, g);
                                apply_move(&mut counts, fold_of, b, f);
                                improved = true;
                                continue 'pair;
                            }
                        }
                    }
                    break;
                }
            }
        }
    }
}

fn best_fold(desired: &[Vec<f64>], capacity: &[f64], label: usize) -> usize {
    let mut best = 0;
    for f in 1..desired.len() {
        let (d, bd) = (desired[f][label], desired[best][label]);
        if d > bd || (d == bd && capacity[f] > capacity[best]) {
            best = f;
        }
    }
    best
}

fn most_capacity(capacity: &[f64]) -> usize {
    let mut best = 0;
    for f in 1..capacity.len() {
        if capacity[f] > capacity[best] {
            best = f;
        }
    }
    best
}

/// Draws a stratified subset of roughly `fraction` of the rows by taking one
/// fold of a `round(1/fraction)`-fold split. The subset is returned as
/// `valid`, the remaining rows as `train`; a fraction of 1 selects every row.
pub fn stratified_subset(
    labels: &BinaryLabelMatrix,
    fraction: f64,
    seed: u64,
) -> Result<SplitView, StratifyError> {
    let n = labels.n_samples();
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(StratifyError::DegenerateInput { n_samples: n, k: 0 });
    }
    let k = (1.0 / fraction).round() as usize;
    if k <= 1 {
        return Ok(SplitView { train: Vec::new(), valid: (0..n).collect() });
    }
    let folds = stratified_kfold(labels, k, seed)?;
    let view = folds.split_views(0)?;
    Ok(view)
}
