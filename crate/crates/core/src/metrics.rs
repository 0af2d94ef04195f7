//! Evaluation metrics: accuracy, mean cross entropy, per-model/ensemble
//! reports, and the bias–variance–covariance split of an ensemble's squared
//! error.

use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};
use crate::losses::ce_raw;
use crate::numerics::{argmax, Matrix, ProbVector};

fn check_pair(predictions: ArrayView2<'_, f64>, labels: ArrayView2<'_, f64>) -> Result<()> {
    if labels.nrows() == 0 {
        return Err(AceError::config(
            "labels",
            "cannot evaluate on zero samples",
        ));
    }
    if predictions.dim() != labels.dim() {
        return Err(AceError::dim(format!(
            "predictions {:?} vs labels {:?}",
            predictions.dim(),
            labels.dim()
        )));
    }
    Ok(())
}

/// Fraction of rows whose argmax (lowest index on ties) matches the label's.
pub fn accuracy(predictions: ArrayView2<'_, f64>, labels: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(predictions, labels)?;
    let hits = predictions
        .rows()
        .into_iter()
        .zip(labels.rows())
        .filter(|(p, l)| argmax(*p) == argmax(*l))
        .count();
    Ok(hits as f64 / labels.nrows() as f64)
}

/// Sample mean of `H(label, prediction)`.
pub fn mean_cross_entropy(
    predictions: ArrayView2<'_, f64>,
    labels: ArrayView2<'_, f64>,
) -> Result<f64> {
    check_pair(predictions, labels)?;
    let total: f64 = predictions
        .rows()
        .into_iter()
        .zip(labels.rows())
        .map(|(q, p)| ce_raw(p, q))
        .sum();
    Ok(total / labels.nrows() as f64)
}

fn stack(v: &[ProbVector]) -> Result<Matrix> {
    let width = v.first().map_or(0, ProbVector::len);
    if v.iter().any(|p| p.len() != width) {
        return Err(AceError::dim("distributions of different lengths"));
    }
    Ok(Matrix::from_shape_fn((v.len(), width), |(i, j)| v[i][j]))
}

/// [`accuracy`] over lists of distributions.
pub fn accuracy_of(predictions: &[ProbVector], labels: &[ProbVector]) -> Result<f64> {
    accuracy(stack(predictions)?.view(), stack(labels)?.view())
}

/// [`mean_cross_entropy`] over lists of distributions.
pub fn mean_cross_entropy_of(predictions: &[ProbVector], labels: &[ProbVector]) -> Result<f64> {
    mean_cross_entropy(stack(predictions)?.view(), stack(labels)?.view())
}

/// Ensemble and per-member scores on one labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ensemble_accuracy: f64,
    /// `H(p, q̄)` averaged over samples.
    pub ensemble_ce: f64,
    pub model_accuracies: Vec<f64>,
    pub model_ces: Vec<f64>,
    pub mean_model_accuracy: f64,
    pub mean_model_ce: f64,
}

impl EvalReport {
    /// `member_predictions[k]` holds member `k`'s softmax rows;
    /// `ensemble_prediction` their aggregate.
    pub fn evaluate(
        member_predictions: &[Matrix],
        ensemble_prediction: &Matrix,
        labels: &Matrix,
    ) -> Result<Self> {
        if member_predictions.is_empty() {
            return Err(AceError::InvalidInput("no member predictions".into()));
        }
        let model_accuracies = member_predictions
            .iter()
            .map(|q| accuracy(q.view(), labels.view()))
            .collect::<Result<Vec<_>>>()?;
        let model_ces = member_predictions
            .iter()
            .map(|q| mean_cross_entropy(q.view(), labels.view()))
            .collect::<Result<Vec<_>>>()?;
        let k = member_predictions.len() as f64;
        Ok(EvalReport {
            ensemble_accuracy: accuracy(ensemble_prediction.view(), labels.view())?,
            ensemble_ce: mean_cross_entropy(ensemble_prediction.view(), labels.view())?,
            mean_model_accuracy: model_accuracies.iter().sum::<f64>() / k,
            mean_model_ce: model_ces.iter().sum::<f64>() / k,
            model_accuracies,
            model_ces,
        })
    }
}

/// Bias–variance–covariance split of an averaging regression ensemble,
/// averaged over samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BvcReport {
    pub bias_sq: f64,
    pub variance: f64,
    pub covariance: f64,
    pub sum: f64,
    /// Mean over samples and repetitions of `(F̄ - y)²`.
    pub ensemble_mse: f64,
}

/// Decompose the ensemble's expected squared error.
///
/// `predictions[[r, k, i]]` is member `k`'s prediction for sample `i` in
/// repetition `r`. Expectations are empirical means over the `R` repetitions
/// (population normalisation, so the three terms sum exactly to the
/// empirical ensemble MSE up to rounding):
///
/// ```text
/// bias²      = ((1/K) Σ_k E[F^k] - y)²
/// variance   = (1/K²) Σ_k E[(F^k - E F^k)²]
/// covariance = (1/K²) Σ_k Σ_{j≠k} E[(F^k - E F^k)(F^j - E F^j)]
/// ```
pub fn bias_var_cov(predictions: &Array3<f64>, targets: &[f64]) -> Result<BvcReport> {
    let (reps, k, n) = predictions.dim();
    if reps < 2 {
        return Err(AceError::config(
            "repetitions",
            format!("need at least 2 repeated trainings, got {reps}"),
        ));
    }
    if k == 0 || n == 0 {
        return Err(AceError::InvalidInput("empty prediction tensor".into()));
    }
    if targets.len() != n {
        return Err(AceError::dim(format!(
            "{} targets for {n} samples",
            targets.len()
        )));
    }
    let (rf, kf) = (reps as f64, k as f64);
    let mut acc = BvcReport {
        bias_sq: 0.0,
        variance: 0.0,
        covariance: 0.0,
        sum: 0.0,
        ensemble_mse: 0.0,
    };
    let mut means = vec![0.0; k];
    let mut dev = vec![0.0; k];
    for (i, &y) in targets.iter().enumerate() {
        for (m, mean) in means.iter_mut().enumerate() {
            *mean = (0..reps).map(|r| predictions[[r, m, i]]).sum::<f64>() / rf;
        }
        let ens_mean = means.iter().sum::<f64>() / kf;
        acc.bias_sq += (ens_mean - y).powi(2);

        let (mut var, mut cov, mut mse) = (0.0, 0.0, 0.0);
        for r in 0..reps {
            for m in 0..k {
                dev[m] = predictions[[r, m, i]] - means[m];
            }
            let total: f64 = dev.iter().sum();
            let squares: f64 = dev.iter().map(|d| d * d).sum();
            var += squares;
            // Σ_k Σ_{j≠k} d_k d_j = (Σ d)² - Σ d²
            cov += total * total - squares;
            let fbar = (0..k).map(|m| predictions[[r, m, i]]).sum::<f64>() / kf;
            mse += (fbar - y).powi(2);
        }
        acc.variance += var / (rf * kf * kf);
        acc.covariance += cov / (rf * kf * kf);
        acc.ensemble_mse += mse / rf;
    }
    let nf = n as f64;
    acc.bias_sq /= nf;
    acc.variance /= nf;
    acc.covariance /= nf;
    acc.ensemble_mse /= nf;
    acc.sum = acc.bias_sq + acc.variance + acc.covariance;
    Ok(acc)
}

/// Mean squared error of predictions against targets.
pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(AceError::dim(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(AceError::config(
            "targets",
            "cannot evaluate on zero samples",
        ));
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / targets.len() as f64)
}
