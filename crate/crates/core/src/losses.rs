//! Dual-view cross-entropy, re-balanced smooth labels and the total objective.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::balance::BalanceWeights;
use crate::error::{Error, Result};

/// Pre-softmax scores, one row per sample (N×L).
pub type Logits = Array2<f64>;

/// Re-balanced target distributions, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothLabels {
    pub values: Array2<f64>,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub cons: f64,
    pub total: f64,
    pub lambda: f64,
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise numerically stable log-softmax.
pub fn log_softmax(logits: &Logits) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let lse = log_sum_exp(row.view());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: &Logits) -> Array2<f64> {
    log_softmax(logits).mapv(f64::exp)
}

fn check_labels(labels: &[usize], logits: &Logits) -> Result<()> {
    let (n, l) = logits.dim();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "labels vs logits rows",
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= l) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: l,
            row: Some(row),
        });
    }
    Ok(())
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, context: &'static str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context,
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean single-view cross-entropy against hard labels.
pub fn cross_entropy(logits: &Logits, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits)?;
    let lsm = log_softmax(logits);
    let n = labels.len() as f64;
    Ok(-labels.iter().enumerate().map(|(i, &y)| lsm[[i, y]]).sum::<f64>() / n)
}

/// Classification loss over an image and its transformed copy. The two
/// views are summed, not averaged.
pub fn dual_view_ce(logits: &Logits, logits_flipped: &Logits, labels: &[usize]) -> Result<f64> {
    check_same_shape(logits, logits_flipped, "dual-view logits")?;
    Ok(cross_entropy(logits, labels)? + cross_entropy(logits_flipped, labels)?)
}

/// Gradient of the mean single-view cross-entropy: `(softmax - onehot) / N`.
pub fn cross_entropy_grad(logits: &Logits, labels: &[usize]) -> Result<Array2<f64>> {
    check_labels(labels, logits)?;
    let n = labels.len() as f64;
    let mut grad = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n);
    Ok(grad)
}

/// `ỹ(i,l) = (1 - α) y(i,l) + α B_l / L` using the normalized weights.
pub fn make_smooth_labels(
    labels: &[usize],
    weights: &BalanceWeights,
    alpha: f64,
    num_classes: usize,
) -> Result<SmoothLabels> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidHyperparameter {
            name: "alpha",
            value: alpha,
            reason: "must lie in [0, 1]",
        });
    }
    if weights.num_classes() != num_classes {
        return Err(Error::ShapeMismatch {
            context: "balance weights vs class count",
            expected: vec![num_classes],
            actual: vec![weights.num_classes()],
        });
    }
    let l = num_classes as f64;
    let mut values = Array2::<f64>::zeros((labels.len(), num_classes));
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: num_classes,
                row: Some(i),
            });
        }
        for (c, &b) in weights.normalized.iter().enumerate() {
            let hard = if c == y { 1.0 } else { 0.0 };
            values[[i, c]] = (1.0 - alpha) * hard + alpha * b / l;
        }
    }
    Ok(SmoothLabels { values, alpha })
}

/// Single-view cross-entropy against soft targets, averaged over rows.
pub fn smooth_ce(logits: &Logits, targets: &SmoothLabels) -> Result<f64> {
    check_same_shape(logits, &targets.values, "logits vs smooth targets")?;
    let n = logits.nrows() as f64;
    let lsm = log_softmax(logits);
    Ok(-(&lsm * &targets.values).sum() / n)
}

/// [`smooth_ce`] applied to both views and summed.
pub fn dual_view_smooth_ce(
    logits: &Logits,
    logits_flipped: &Logits,
    targets: &SmoothLabels,
) -> Result<f64> {
    Ok(smooth_ce(logits, targets)? + smooth_ce(logits_flipped, targets)?)
}

/// Gradient of [`smooth_ce`]: `(softmax - ỹ) / N`. Target rows must sum to 1.
pub fn smooth_ce_grad(logits: &Logits, targets: &SmoothLabels) -> Result<Array2<f64>> {
    check_same_shape(logits, &targets.values, "logits vs smooth targets")?;
    let n = logits.nrows() as f64;
    Ok((softmax(logits) - &targets.values) / n)
}

pub fn total_loss(cls: f64, cons: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidHyperparameter {
            name: "lambda",
            value: lambda,
            reason: "must be non-negative",
        });
    }
    Ok(LossBreakdown {
        cls,
        cons,
        total: cls + lambda * cons,
        lambda,
    })
}

/// Row entropies `-Σ p log p`, treating `0 log 0` as 0.
pub fn row_entropy(rows: &Array2<f64>) -> Vec<f64> {
    rows.axis_iter(Axis(0))
        .map(|r| -r.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .collect()
}
