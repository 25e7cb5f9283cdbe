//! Class-balanced weights from the effective number of samples.
//!
//! A class with `n` samples has effective number `(1 - β^n) / (1 - β)` and
//! weight equal to its reciprocal. Downstream consumers (attention
//! re-balancing and smooth labels) use the normalized weights, which are
//! rescaled so they sum to the number of classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class training sample counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    counts: Vec<u64>,
    class_names: Vec<String>,
}

impl ClassCounts {
    pub fn new(counts: Vec<u64>, class_names: Vec<String>) -> Result<Self> {
        if counts.len() != class_names.len() {
            return Err(Error::ShapeMismatch {
                context: "class counts vs class names",
                expected: vec![class_names.len()],
                actual: vec![counts.len()],
            });
        }
        if counts.len() < 2 {
            return Err(Error::TooFewClasses(counts.len()));
        }
        if let Some(i) = counts.iter().position(|&c| c < 1) {
            return Err(Error::EmptyClass {
                class: class_names[i].clone(),
                count: counts[i],
            });
        }
        Ok(Self {
            counts,
            class_names,
        })
    }

    /// Counts with generated names `class0`, `class1`, ...
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let names = (0..counts.len()).map(|i| format!("class{i}")).collect();
        Self::new(counts, names)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Largest count divided by smallest.
    pub fn imbalance_ratio(&self) -> f64 {
        let max = *self.counts.iter().max().unwrap_or(&1) as f64;
        let min = *self.counts.iter().min().unwrap_or(&1) as f64;
        max / min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceWeights {
    pub beta: f64,
    /// `(1 - β) / (1 - β^n_l)` per class.
    pub raw: Vec<f64>,
    /// `raw` rescaled to sum to the number of classes.
    pub normalized: Vec<f64>,
}

impl BalanceWeights {
    /// All-ones weights for `num_classes` classes (what β = 0 produces).
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            beta: 0.0,
            raw: vec![1.0; num_classes],
            normalized: vec![1.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.normalized.len()
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidHyperparameter {
            name: "beta",
            value: beta,
            reason: "must lie in [0, 1)",
        });
    }
    Ok(())
}

/// `(1 - β^n) / (1 - β)`, the sum of the geometric series `Σ_{k<n} β^k`.
///
/// `β^n` is evaluated as `exp(n ln β)` through `expm1`, which keeps full
/// precision when β is close to 1 and `n` is large.
pub fn effective_number(n: u64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if n < 1 {
        return Err(Error::EmptyClass {
            class: "<anonymous>".into(),
            count: n,
        });
    }
    if beta == 0.0 || n == 1 {
        return Ok(1.0);
    }
    // 1 - β is exact for β in [0.5, 1) and accurate elsewhere.
    let one_minus_beta = 1.0 - beta;
    let log_beta = (-one_minus_beta).ln_1p();
    let one_minus_pow = -(n as f64 * log_beta).exp_m1();
    Ok(one_minus_pow / one_minus_beta)
}

/// Weight `(1 - β) / (1 - β^n)` of a single class with `n` samples.
pub fn balance_weight(n: u64, beta: f64) -> Result<f64> {
    Ok(1.0 / effective_number(n, beta)?)
}

pub fn compute_balance_weights(counts: &ClassCounts, beta: f64) -> Result<BalanceWeights> {
    check_beta(beta)?;
    let raw = counts
        .counts()
        .iter()
        .zip(counts.class_names())
        .map(|(&n, name)| {
            balance_weight(n, beta).map_err(|e| match e {
                Error::EmptyClass { count, .. } => Error::EmptyClass {
                    class: name.clone(),
                    count,
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let normalized = normalize_to_count(&raw);
    Ok(BalanceWeights {
        beta,
        raw,
        normalized,
    })
}

fn normalize_to_count(raw: &[f64]) -> Vec<f64> {
    let sum: f64 = raw.iter().sum();
    let scale = raw.len() as f64 / sum;
    raw.iter().map(|w| w * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn series(n: u64, beta: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += term;
            term *= beta;
        }
        sum
    }

    #[test]
    fn single_sample_weight_is_one() {
        assert_eq!(balance_weight(1, 0.9999).unwrap(), 1.0);
        assert_eq!(effective_number(1, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn two_samples_half_beta() {
        assert_relative_eq!(balance_weight(2, 0.5).unwrap(), 2.0 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn zero_beta_is_uniform() {
        for k in [1, 2, 17, 100_000] {
            assert_eq!(balance_weight(k, 0.0).unwrap(), 1.0);
        }
        let counts = ClassCounts::from_counts(vec![3, 500, 9]).unwrap();
        let w = compute_balance_weights(&counts, 0.0).unwrap();
        assert_eq!(w.raw, vec![1.0; 3]);
        assert_eq!(w.normalized, vec![1.0; 3]);
    }

    #[test]
    fn equal_counts_normalize_to_ones() {
        let counts = ClassCounts::from_counts(vec![10; 7]).unwrap();
        let w = compute_balance_weights(&counts, 0.9999).unwrap();
        for v in &w.normalized {
            assert_relative_eq!(*v, 1.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn effective_number_examples() {
        assert_relative_eq!(effective_number(3, 0.5).unwrap(), series(3, 0.5), max_relative = 1e-15);
        assert_relative_eq!(effective_number(3, 0.5).unwrap(), 1.75, max_relative = 1e-15);
        assert!((effective_number(200, 0.9).unwrap() - 10.0).abs() < 1e-8);
    }

    #[test]
    fn stable_near_one() {
        let n = 50_000;
        let beta = 0.9999;
        let expected = series(n, beta);
        assert_relative_eq!(effective_number(n, beta).unwrap(), expected, max_relative = 1e-10);
    }

    #[test]
    fn rejects_bad_beta_and_empty_class() {
        assert!(matches!(
            effective_number(3, 1.0),
            Err(Error::InvalidHyperparameter { name: "beta", .. })
        ));
        assert!(effective_number(3, -0.1).is_err());
        assert!(matches!(effective_number(0, 0.5), Err(Error::EmptyClass { .. })));
        assert!(matches!(
            ClassCounts::new(vec![3, 0], vec!["a".into(), "b".into()]),
            Err(Error::EmptyClass { ref class, .. }) if class == "b"
        ));
        assert!(matches!(ClassCounts::from_counts(vec![4]), Err(Error::TooFewClasses(1))));
        let counts = ClassCounts::from_counts(vec![3, 4]).unwrap();
        assert!(compute_balance_weights(&counts, 1.0).is_err());
    }

    #[test]
    fn oracle_grid() {
        for beta in [0.5, 0.9, 0.99, 0.9999] {
            for n in 1..=1000 {
                let got = effective_number(n, beta).unwrap();
                let want = series(n, beta);
                assert!(((got - want) / want).abs() <= 1e-10, "β={beta} n={n}: {got} vs {want}");
                let w = balance_weight(n, beta).unwrap();
                assert!((w * got - 1.0).abs() <= 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn weights_in_range_and_decreasing(
            // Keeps β^n well above the f64 resolution so the bounds stay strict.
            counts in proptest::collection::vec(1u64..300, 2..10),
            beta in 0.9f64..0.99999,
        ) {
            let cc = ClassCounts::from_counts(counts.clone()).unwrap();
            let w = compute_balance_weights(&cc, beta).unwrap();
            let sum: f64 = w.normalized.iter().sum();
            prop_assert!((sum - counts.len() as f64).abs() < 1e-9);
            for (l, &n) in counts.iter().enumerate() {
                let r = w.raw[l];
                let direct = (1.0 - beta) / (1.0 - beta.powf(n as f64));
                prop_assert!(((r - direct) / direct).abs() < 1e-9);
                prop_assert!(r > 1.0 - beta && r <= 1.0);
                for (m, &k) in counts.iter().enumerate() {
                    if n < k {
                        prop_assert!(w.raw[l] > w.raw[m]);
                    }
                }
            }
        }

        #[test]
        fn permutation_equivariant(
            counts in proptest::collection::vec(1u64..5000, 2..8),
            rot in 0usize..8,
        ) {
            let beta = 0.9999;
            let mut rotated = counts.clone();
            let k = rot % counts.len();
            rotated.rotate_left(k);
            let a = compute_balance_weights(&ClassCounts::from_counts(counts.clone()).unwrap(), beta).unwrap();
            let b = compute_balance_weights(&ClassCounts::from_counts(rotated).unwrap(), beta).unwrap();
            let mut a_rot = a.normalized.clone();
            a_rot.rotate_left(k);
            for (x, y) in a_rot.iter().zip(&b.normalized) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
