//! Z-diff: accuracy of a linear classifier that recovers which factor was
//! held fixed from averaged absolute latent differences of example pairs.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LatentCodes;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZDiffConfig {
    /// Pairs averaged into one vote.
    pub pairs: usize,
    /// Training votes per factor.
    pub n_train: usize,
    /// Test votes per factor.
    pub n_test: usize,
    /// Hinge-loss weight.
    pub c: f64,
    pub epochs: usize,
    pub step: f64,
}

impl Default for ZDiffConfig {
    fn default() -> Self {
        ZDiffConfig {
            pairs: 64,
            n_train: 500,
            n_test: 100,
            c: 0.01,
            epochs: 500,
            step: 0.1,
        }
    }
}

impl ZDiffConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.pairs < 1 {
            return Err(Error::Config("z-diff needs at least one pair per vote".into()));
        }
        if self.n_train < k || self.n_test < k {
            return Err(Error::Config(format!(
                "z-diff vote counts ({}, {}) must be at least the factor count {k}",
                self.n_train, self.n_test
            )));
        }
        if !(self.c > 0.0) || !(self.step > 0.0) || self.epochs == 0 {
            return Err(Error::Config("z-diff C, step and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Z-diff of `model` on the test split of `dataset`, in `[0, 100]`.
pub fn zdiff_score(model: &ModelParams, dataset: &Dataset, config: &ZDiffConfig, seed: u64) -> Result<f64> {
    zdiff_from_codes(&LatentCodes::from_model(model, dataset)?, config, seed)
}

/// Z-diff on precomputed codes; pairs are drawn among the rows.
pub fn zdiff_from_codes(latents: &LatentCodes, config: &ZDiffConfig, seed: u64) -> Result<f64> {
    let d = latents.latent_dim();
    let groups: Vec<FactorGroups> = (0..latents.num_factors())
        .map(|j| FactorGroups::new(&latents.factor(j)))
        .filter(|g| g.distinct > 1 && !g.pairable.is_empty())
        .collect();
    if groups.len() < 2 {
        return Err(Error::invalid("z-diff needs at least two factors with several values"));
    }
    config.validate(groups.len())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vote = |j: usize, rng: &mut ChaCha8Rng| {
        let g = &groups[j];
        let mut acc = vec![0.0; d];
        for _ in 0..config.pairs {
            let a = *g.pairable.choose(rng).unwrap();
            let members = &g.members[g.group_of[a]];
            let b = loop {
                let b = *members.choose(rng).unwrap();
                if b != a {
                    break b;
                }
            };
            for (s, (x, y)) in acc.iter_mut().zip(latents.codes.row(a).iter().zip(latents.codes.row(b))) {
                *s += (x - y).abs();
            }
        }
        acc.iter_mut().for_each(|s| *s /= config.pairs as f64);
        acc
    };
    let draw = |n: usize, rng: &mut ChaCha8Rng| {
        let mut xs = Vec::with_capacity(n * groups.len());
        let mut ys = Vec::with_capacity(n * groups.len());
        for _ in 0..n {
            for j in 0..groups.len() {
                xs.push(vote(j, rng));
                ys.push(j);
            }
        }
        (xs, ys)
    };
    let (train_x, train_y) = draw(config.n_train, &mut rng);
    let (test_x, test_y) = draw(config.n_test, &mut rng);

    let clf = OneVsRest::fit(&train_x, &train_y, groups.len(), config);
    let correct = test_x
        .iter()
        .zip(&test_y)
        .filter(|(x, &y)| clf.predict(x) == y)
        .count();
    Ok(100.0 * correct as f64 / test_y.len() as f64)
}

struct FactorGroups {
    distinct: usize,
    group_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    /// Rows whose value is shared by at least one other row.
    pairable: Vec<usize>,
}

impl FactorGroups {
    fn new(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        let group_of: Vec<usize> = values
            .iter()
            .map(|v| sorted.binary_search_by(|u| u.total_cmp(v)).unwrap())
            .collect();
        let mut members = vec![Vec::new(); sorted.len()];
        for (r, &g) in group_of.iter().enumerate() {
            members[g].push(r);
        }
        let pairable = (0..values.len()).filter(|&r| members[group_of[r]].len() > 1).collect();
        FactorGroups {
            distinct: sorted.len(),
            group_of,
            members,
            pairable,
        }
    }
}

/// Linear one-vs-rest classifier minimizing `½‖w‖² + C Σ hinge` per class by
/// full-batch subgradient descent with step `η/√t`.
struct OneVsRest {
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

impl OneVsRest {
    fn fit(xs: &[Vec<f64>], ys: &[usize], classes: usize, config: &ZDiffConfig) -> Self {
        let d = xs[0].len();
        let mut weights = vec![vec![0.0; d]; classes];
        let mut biases = vec![0.0; classes];
        for (cls, (w, b)) in weights.iter_mut().zip(biases.iter_mut()).enumerate() {
            for t in 1..=config.epochs {
                let mut gw = w.clone();
                let mut gb = 0.0;
                for (x, &y) in xs.iter().zip(ys) {
                    let sign = if y == cls { 1.0 } else { -1.0 };
                    let margin = sign * (dot(w, x) + *b);
                    if margin < 1.0 {
                        for (g, xi) in gw.iter_mut().zip(x) {
                            *g -= config.c * sign * xi;
                        }
                        gb -= config.c * sign;
                    }
                }
                let eta = config.step / (t as f64).sqrt();
                for (wi, g) in w.iter_mut().zip(&gw) {
                    *wi -= eta * g;
                }
                *b -= eta * gb;
            }
        }
        OneVsRest { weights, biases }
    }

    fn predict(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (cls, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let s = dot(w, x) + b;
            if s > best.1 {
                best = (cls, s);
            }
        }
        best.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Grid of `k` factors with `v` values each; codes are the concatenated
    /// one-hot encodings (or a constant).
    fn synthetic(k: usize, v: usize, one_hot: bool) -> LatentCodes {
        let n = v.pow(k as u32);
        let mut codes = Vec::new();
        let mut factors = Vec::new();
        for mut r in 0..n {
            let mut digits = vec![0; k];
            for dgt in digits.iter_mut() {
                *dgt = r % v;
                r /= v;
            }
            for &dg in &digits {
                for u in 0..v {
                    codes.push(if one_hot && u == dg { 1.0 } else { 0.0 });
                }
                factors.push(dg as f64);
            }
        }
        LatentCodes::new(
            Tensor::new(vec![n, k * v], codes).unwrap(),
            Tensor::new(vec![n, k], factors).unwrap(),
        )
        .unwrap()
    }

    fn quick() -> ZDiffConfig {
        ZDiffConfig {
            n_train: 100,
            n_test: 50,
            epochs: 200,
            ..ZDiffConfig::default()
        }
    }

    #[test]
    fn one_hot_embedding_scores_high() {
        let s = zdiff_from_codes(&synthetic(3, 4, true), &quick(), 0).unwrap();
        assert!(s > 95.0, "score {s}");
    }

    #[test]
    fn constant_codes_score_chance() {
        let s = zdiff_from_codes(&synthetic(3, 4, false), &quick(), 0).unwrap();
        assert!((s - 100.0 / 3.0).abs() <= 10.0, "score {s}");
    }

    #[test]
    fn deterministic_under_seed() {
        let lc = synthetic(2, 5, true);
        let a = zdiff_from_codes(&lc, &quick(), 7).unwrap();
        let b = zdiff_from_codes(&lc, &quick(), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_valued_factor_excluded() {
        let base = synthetic(2, 4, true);
        let n = base.len();
        let mut f = Vec::new();
        for r in 0..n {
            f.extend_from_slice(base.factors.row(r));
            f.push(1.0);
        }
        let lc = LatentCodes::new(base.codes.clone(), Tensor::new(vec![n, 3], f).unwrap()).unwrap();
        let s = zdiff_from_codes(&lc, &quick(), 1).unwrap();
        assert!(s > 95.0);
    }

    #[test]
    fn config_validation() {
        let mut c = ZDiffConfig::default();
        assert!(c.validate(5).is_ok());
        c.pairs = 0;
        assert!(c.validate(5).is_err());
        let c = ZDiffConfig {
            n_test: 2,
            ..ZDiffConfig::default()
        };
        assert!(c.validate(5).is_err());
    }
}
