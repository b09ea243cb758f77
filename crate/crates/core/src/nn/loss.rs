//! Data loss (softmax cross-entropy) and the ±1-attractor auxiliary penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Which form of the auxiliary penalty to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxForm {
    /// `|-1 - f|` for `f < 0`, `|1 - f|` for `f >= 0`: pulls every weight toward ±1.
    #[default]
    Abs,
    /// Signed `(-1 - f)` / `(1 - f)` summand; its gradient is the constant -1.
    Literal,
}

impl std::str::FromStr for AuxForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(AuxForm::Abs),
            "literal" => Ok(AuxForm::Literal),
            _ => Err(Error::invalid(format!("aux form must be `abs` or `literal`, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for AuxForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AuxForm::Abs => "abs",
            AuxForm::Literal => "literal",
        })
    }
}

impl AuxForm {
    /// Penalty contributed by a single weight. Zero belongs to the positive branch.
    pub fn penalty(self, f: f64) -> f64 {
        match (self, f < 0.0) {
            (AuxForm::Abs, true) => (-1.0 - f).abs(),
            (AuxForm::Abs, false) => (1.0 - f).abs(),
            (AuxForm::Literal, true) => -1.0 - f,
            (AuxForm::Literal, false) => 1.0 - f,
        }
    }

    /// Subgradient of [`AuxForm::penalty`]. For `Abs`: -1 on `(-inf, -1]` and
    /// `[0, 1)`, +1 on `(-1, 0)` and `[1, inf)`.
    pub fn subgradient(self, f: f64) -> f64 {
        match self {
            AuxForm::Literal => -1.0,
            AuxForm::Abs => {
                if f <= -1.0 || (0.0..1.0).contains(&f) {
                    -1.0
                } else {
                    1.0
                }
            }
        }
    }

    pub fn penalty_sum<E: Element>(self, weights: &[E]) -> f64 {
        weights.iter().map(|w| self.penalty(w.as_f64())).sum()
    }
}

/// Total and per-conv-layer auxiliary penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxLoss {
    pub total: f64,
    pub per_layer: Vec<f64>,
}

fn check_labels(batch: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn logits_dims<E: Element>(logits: &Tensor<E>) -> Result<(usize, usize)> {
    match *logits.shape() {
        [b, c] => Ok((b, c)),
        _ => Err(Error::invalid(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        ))),
    }
}

/// Per-row log-softmax terms evaluated with max subtraction.
fn log_softmax_row(row: &[f64]) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    (max, sum.ln())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<f64> {
    let (batch, classes) = logits_dims(logits)?;
    check_labels(batch, classes, labels)?;
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let (max, lse) = log_softmax_row(&row);
        total += lse - (row[label] - max);
    }
    Ok(total / batch as f64)
}

/// Cross-entropy value plus its gradient with respect to the logits.
pub(crate) fn cross_entropy_with_grad<E: Element>(
    logits: &Tensor<E>,
    labels: &[usize],
) -> Result<(f64, Vec<E>)> {
    let (batch, classes) = logits_dims(logits)?;
    check_labels(batch, classes, labels)?;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(batch * classes);
    let inv_b = 1.0 / batch as f64;
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let (max, lse) = log_softmax_row(&row);
        total += lse - (row[label] - max);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max - lse).exp();
            let target = if j == label { 1.0 } else { 0.0 };
            grad.push(E::from_f64((p - target) * inv_b));
        }
    }
    Ok((total * inv_b, grad))
}
