use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeResult {
    /// Test accuracy in `[0, 1]`.
    pub accuracy: f64,
    /// Difference of class-conditional training means (positive minus negative).
    pub direction: Vec<f64>,
    pub bias: f64,
    /// Set when the class means coincide and `direction` is zero.
    pub degenerate: bool,
}

/// Classifies a binary attribute by projecting latents onto the difference
/// of the training class means and thresholding with a hinge-optimal bias.
pub fn attribute_classifier(
    train_codes: &Tensor,
    train_attr: &[bool],
    test_codes: &Tensor,
    test_attr: &[bool],
) -> Result<AttributeResult> {
    let check = |codes: &Tensor, attr: &[bool], what: &str| {
        if codes.rank() != 2 || codes.shape()[0] != attr.len() {
            return Err(Error::invalid(format!(
                "{what} codes {:?} do not match {} labels",
                codes.shape(),
                attr.len()
            )));
        }
        Ok(())
    };
    check(train_codes, train_attr, "train")?;
    check(test_codes, test_attr, "test")?;
    let d = train_codes.shape()[1];
    if test_codes.shape()[1] != d {
        return Err(Error::invalid("train and test codes differ in width"));
    }
    let n_pos = train_attr.iter().filter(|&&a| a).count();
    let n_neg = train_attr.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("attribute training data has a single class"));
    }

    let mut direction = vec![0.0; d];
    for (r, &a) in train_attr.iter().enumerate() {
        let w = if a { 1.0 / n_pos as f64 } else { -1.0 / n_neg as f64 };
        for (s, v) in direction.iter_mut().zip(train_codes.row(r)) {
            *s += w * v;
        }
    }
    let degenerate = direction.iter().all(|&v| v == 0.0);

    let project = |codes: &Tensor, r: usize| -> f64 { codes.row(r).iter().zip(&direction).map(|(a, b)| a * b).sum() };
    let train_proj: Vec<f64> = (0..train_attr.len()).map(|r| project(train_codes, r)).collect();
    let bias = hinge_bias(&train_proj, train_attr);

    let correct = (0..test_attr.len())
        .filter(|&r| (project(test_codes, r) + bias > 0.0) == test_attr[r])
        .count();
    Ok(AttributeResult {
        accuracy: correct as f64 / test_attr.len().max(1) as f64,
        direction,
        bias,
        degenerate,
    })
}

/// Bias `b` minimizing `Σ max(0, 1 − y(p + b))` over candidates at the
/// negated midpoints of the sorted projections and beyond both ends.
fn hinge_bias(proj: &[f64], attr: &[bool]) -> f64 {
    let mut sorted = proj.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = sorted.windows(2).map(|w| -(w[0] + w[1]) / 2.0).collect();
    candidates.push(-sorted[0] + 1.0);
    candidates.push(-sorted[sorted.len() - 1] - 1.0);
    let loss = |b: f64| -> f64 {
        proj.iter()
            .zip(attr)
            .map(|(p, &a)| {
                let y = if a { 1.0 } else { -1.0 };
                (1.0 - y * (p + b)).max(0.0)
            })
            .sum()
    };
    let mut best = (candidates[0], loss(candidates[0]));
    for &b in &candidates[1..] {
        let l = loss(b);
        if l < best.1 {
            best = (b, l);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn clusters(n: usize, sep: f64, informative: bool, seed: u64) -> (Tensor, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut attr = Vec::new();
        for i in 0..n {
            let a = i % 2 == 0;
            let shift = if informative && a { sep } else { 0.0 };
            data.push(shift + 0.25 * rng.sample::<f64, _>(StandardNormal));
            data.push(rng.sample::<f64, _>(StandardNormal));
            attr.push(if informative { a } else { rng.random() });
        }
        (Tensor::new(vec![n, 2], data).unwrap(), attr)
    }

    #[test]
    fn separated_clusters_classified() {
        let (tr, ta) = clusters(400, 1.0, true, 0);
        let (te, tea) = clusters(200, 1.0, true, 1);
        let r = attribute_classifier(&tr, &ta, &te, &tea).unwrap();
        assert!(r.accuracy > 0.9, "accuracy {}", r.accuracy);
        assert!(!r.degenerate);
    }

    #[test]
    fn independent_attribute_near_half() {
        let (tr, ta) = clusters(2000, 0.0, false, 2);
        let (te, tea) = clusters(2000, 0.0, false, 3);
        let r = attribute_classifier(&tr, &ta, &te, &tea).unwrap();
        assert!((r.accuracy - 0.5).abs() < 0.05, "accuracy {}", r.accuracy);
    }

    #[test]
    fn identical_means_flagged() {
        let tr = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let attr = [true, false, true, false];
        let r = attribute_classifier(&tr, &attr, &tr, &attr).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.direction, vec![0.0, 0.0]);
    }

    #[test]
    fn single_class_rejected() {
        let tr = Tensor::zeros(&[3, 2]);
        assert!(attribute_classifier(&tr, &[true; 3], &tr, &[true; 3]).is_err());
    }
}
