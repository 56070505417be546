//! Separated attribute predictability: for each factor, the gap between the
//! two latents that best predict it, averaged over factors.

use rayon::prelude::*;

use super::{mean, variance, LatentCodes};
use crate::data::FactorKind;
use crate::error::{Error, Result};

/// Latents whose variance falls below this are treated as inactive.
pub const ACTIVITY_THRESHOLD: f64 = 0.02;

/// Largest class count for which every class ordering is searched.
const EXHAUSTIVE_CLASSES: usize = 6;

/// Fewer examples per class than this makes a classification entry noisy.
const MIN_PER_CLASS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub d: usize,
    pub k: usize,
    /// Row-major `d × k`, entries in `[0, 1]`.
    pub entries: Vec<f64>,
    pub kinds: Vec<FactorKind>,
    pub active: Vec<bool>,
    /// Columns dropped because the factor is constant.
    pub skipped: Vec<bool>,
}

impl ScoreMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SapResult {
    pub matrix: ScoreMatrix,
    pub score: f64,
}

/// Mean over the given columns of (largest − second largest) entry; with a
/// single row the second largest is 0.
pub fn sap_from_matrix(entries: &[f64], d: usize, k: usize, columns: impl IntoIterator<Item = usize>) -> f64 {
    let mut gaps = Vec::new();
    for j in columns {
        let (mut top, mut second) = (f64::NEG_INFINITY, 0.0);
        if d > 1 {
            second = f64::NEG_INFINITY;
        }
        for i in 0..d {
            let v = entries[i * k + j];
            if v > top {
                if d > 1 {
                    second = top;
                }
                top = v;
            } else if d > 1 && v > second {
                second = v;
            }
        }
        gaps.push(top - second);
    }
    if gaps.is_empty() {
        0.0
    } else {
        mean(&gaps)
    }
}

pub fn sap_score(latents: &LatentCodes, kinds: &[FactorKind]) -> Result<SapResult> {
    let (d, k) = (latents.latent_dim(), latents.num_factors());
    if kinds.len() != k {
        return Err(Error::invalid(format!("{} factor kinds for {k} factors", kinds.len())));
    }
    if d == 0 || latents.len() < 2 {
        return Err(Error::invalid("SAP needs at least one latent and two rows"));
    }
    let latent_cols: Vec<Vec<f64>> = (0..d).map(|i| latents.column(i)).collect();
    let active: Vec<bool> = latent_cols
        .iter()
        .map(|c| variance(c) >= ACTIVITY_THRESHOLD)
        .collect();

    let columns: Vec<Option<Vec<f64>>> = (0..k)
        .into_par_iter()
        .map(|j| {
            let factor = latents.factor(j);
            if variance(&factor) == 0.0 {
                log::warn!("factor {j} is constant; its SAP column is skipped");
                return None;
            }
            let prepared = match kinds[j] {
                FactorKind::Regression => Prepared::Regression,
                FactorKind::Classification => Prepared::Classification(class_ids(j, &factor)),
            };
            let col = (0..d)
                .map(|i| {
                    if !active[i] {
                        return 0.0;
                    }
                    match &prepared {
                        Prepared::Regression => r_squared(&latent_cols[i], &factor),
                        Prepared::Classification(c) => threshold_score(&latent_cols[i], c),
                    }
                })
                .collect();
            Some(col)
        })
        .collect();

    let skipped: Vec<bool> = columns.iter().map(Option::is_none).collect();
    if skipped.iter().all(|&s| s) {
        return Err(Error::invalid("every factor column is constant"));
    }
    let mut entries = vec![0.0; d * k];
    for (j, col) in columns.iter().enumerate() {
        if let Some(col) = col {
            for i in 0..d {
                entries[i * k + j] = col[i];
            }
        }
    }
    let score = sap_from_matrix(&entries, d, k, (0..k).filter(|&j| !skipped[j]));
    Ok(SapResult {
        matrix: ScoreMatrix {
            d,
            k,
            entries,
            kinds: kinds.to_vec(),
            active,
            skipped,
        },
        score,
    })
}

enum Prepared {
    Regression,
    Classification(Classes),
}

/// Squared Pearson correlation; 0 when either side is constant.
fn r_squared(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab * sab / (saa * sbb)).clamp(0.0, 1.0)
}

struct Classes {
    ids: Vec<usize>,
    counts: Vec<usize>,
}

fn class_ids(j: usize, factor: &[f64]) -> Classes {
    let mut values = factor.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let ids: Vec<usize> = factor
        .iter()
        .map(|v| values.binary_search_by(|u| u.total_cmp(v)).unwrap())
        .collect();
    let mut counts = vec![0; values.len()];
    for &c in &ids {
        counts[c] += 1;
    }
    if let Some(&min) = counts.iter().min() {
        if min < MIN_PER_CLASS {
            log::warn!("factor {j} has a value with only {min} examples; its SAP column is noisy");
        }
    }
    Classes { ids, counts }
}

/// Best balanced accuracy of contiguous class segments along the sorted
/// latent (one threshold between each adjacent pair of classes), rescaled so
/// chance is 0 and perfect is 1.
fn threshold_score(latent: &[f64], classes: &Classes) -> f64 {
    let c = classes.counts.len();
    let mut order: Vec<usize> = (0..latent.len()).collect();
    order.sort_by(|&a, &b| latent[a].total_cmp(&latent[b]));

    // runs of tied latent values cannot be split by a threshold
    let mut runs: Vec<Vec<f64>> = Vec::new();
    let mut prev = f64::NAN;
    for &r in &order {
        if latent[r] != prev {
            runs.push(vec![0.0; c]);
            prev = latent[r];
        }
        let cls = classes.ids[r];
        runs.last_mut().unwrap()[cls] += 1.0 / (classes.counts[cls] * c) as f64;
    }

    let best = class_orderings(latent, classes)
        .iter()
        .map(|perm| segment_dp(&runs, perm))
        .fold(0.0, f64::max);
    let chance = 1.0 / c as f64;
    ((best - chance) / (1.0 - chance)).clamp(0.0, 1.0)
}

fn class_orderings(latent: &[f64], classes: &Classes) -> Vec<Vec<usize>> {
    let c = classes.counts.len();
    if c <= EXHAUSTIVE_CLASSES {
        return permutations(c);
    }
    let mut sums = vec![0.0; c];
    for (v, &cls) in latent.iter().zip(&classes.ids) {
        sums[cls] += v;
    }
    let means: Vec<f64> = sums.iter().zip(&classes.counts).map(|(s, &n)| s / n as f64).collect();
    let mut by_mean: Vec<usize> = (0..c).collect();
    by_mean.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    let reversed = by_mean.iter().rev().copied().collect();
    vec![by_mean, reversed]
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Max total weight assigning runs, in order, to non-decreasing segment
/// positions of `perm` (segments may be empty).
fn segment_dp(runs: &[Vec<f64>], perm: &[usize]) -> f64 {
    let c = perm.len();
    let mut best = vec![0.0; c];
    for run in runs {
        let mut prefix = f64::NEG_INFINITY;
        for s in 0..c {
            prefix = prefix.max(best[s]);
            best[s] = prefix + run[perm[s]];
        }
    }
    best.into_iter().fold(f64::NEG_INFINITY, f64::max)
}
