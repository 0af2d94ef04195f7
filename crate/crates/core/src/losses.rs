//! Cross entropy, the amended cross entropy (ACE) and its weighted variant,
//! negative correlation learning (NCL), and a finite-difference oracle.
//!
//! Model indices are zero-based throughout. Loss values clamp probabilities
//! at [`LOG_CLAMP`] before taking logs; gradients are closed-form in logit
//! space and never clamp.

use ndarray::{Array1, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};
use crate::numerics::{softmax, Logits, Matrix, ProbVector, Vector, SIMPLEX_TOL};

/// Lower clamp for probabilities inside `ln`.
pub const LOG_CLAMP: f64 = 1e-12;

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

pub fn lambda_to_gamma(lambda: f64, k: usize) -> f64 {
    lambda * (k as f64 - 1.0) / k as f64
}

pub fn gamma_to_lambda(gamma: f64, k: usize) -> f64 {
    if k <= 1 {
        0.0
    } else {
        gamma * k as f64 / (k as f64 - 1.0)
    }
}

/// Diversity strength of an ACE ensemble.
///
/// `λ ∈ [0, 1]` is stored; `γ = λ (K - 1) / K` is derived. With `alpha` set,
/// the ensemble is aggregated with those fixed weights instead of uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AceCoefficients {
    k: usize,
    lambda: f64,
    alpha: Option<Vec<f64>>,
}

impl AceCoefficients {
    pub fn new(k: usize, lambda: f64) -> Result<Self> {
        if k == 0 {
            return Err(AceError::config("k", "ensemble size must be at least 1"));
        }
        if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
            return Err(AceError::config(
                "lambda",
                format!("{lambda} is outside [0, 1]"),
            ));
        }
        if k == 1 && lambda > 0.0 {
            return Err(AceError::config(
                "lambda",
                format!("{lambda} > 0 needs at least 2 models, got k = 1"),
            ));
        }
        Ok(AceCoefficients {
            k,
            lambda,
            alpha: None,
        })
    }

    pub fn from_gamma(k: usize, gamma: f64) -> Result<Self> {
        if k == 1 && gamma != 0.0 {
            return Err(AceError::config(
                "gamma",
                format!("{gamma} != 0 needs at least 2 models, got k = 1"),
            ));
        }
        if k > 1 {
            let max = lambda_to_gamma(1.0, k);
            if !gamma.is_finite() || gamma < 0.0 || gamma > max {
                return Err(AceError::config(
                    "gamma",
                    format!("{gamma} is outside [0, {max}] for k = {k}"),
                ));
            }
        }
        Self::new(k, gamma_to_lambda(gamma, k).min(1.0))
    }

    /// Attach fixed aggregation weights; they must lie on the K-simplex.
    pub fn with_alpha(mut self, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != self.k {
            return Err(AceError::config(
                "alpha",
                format!("{} weights given for k = {}", alpha.len(), self.k),
            ));
        }
        if let Some(a) = alpha.iter().find(|a| !a.is_finite() || **a < 0.0) {
            return Err(AceError::config("alpha", format!("weight {a} is negative")));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(AceError::config(
                "alpha",
                format!("weights sum to {sum}, not 1"),
            ));
        }
        self.alpha = Some(alpha);
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gamma(&self) -> f64 {
        lambda_to_gamma(self.lambda, self.k)
    }

    pub fn alpha(&self) -> Option<&[f64]> {
        self.alpha.as_deref()
    }

    /// Aggregation weight of model `j`.
    pub fn weight(&self, j: usize) -> f64 {
        match &self.alpha {
            Some(a) => a[j],
            None => 1.0 / self.k as f64,
        }
    }
}

/// Diversity strength of an NCL regression ensemble; `λ = 2γ(1 - 1/K)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NclCoefficients {
    k: usize,
    gamma: f64,
}

impl NclCoefficients {
    pub fn new(k: usize, gamma: f64) -> Result<Self> {
        if k < 2 {
            return Err(AceError::config(
                "k",
                format!("NCL needs at least 2 models, got {k}"),
            ));
        }
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(AceError::config(
                "gamma_ncl",
                format!("{gamma} must be finite and >= 0"),
            ));
        }
        Ok(NclCoefficients { k, gamma })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lambda(&self) -> f64 {
        2.0 * self.gamma * (1.0 - 1.0 / self.k as f64)
    }
}

pub(crate) fn ce_raw(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi != 0.0 {
            acc -= pi * qi.max(LOG_CLAMP).ln();
        }
    }
    acc
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(AceError::dim(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// `H(p, q) = -Σ p_i ln q_i`, with `0 · ln 0 = 0`.
pub fn cross_entropy(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    same_len(p.len(), q.len(), "cross entropy")?;
    Ok(ce_raw(p.view(), q.view()))
}

pub fn entropy(q: &ProbVector) -> f64 {
    ce_raw(q.view(), q.view())
}

/// Gradient of `H(p, softmax(z))` with respect to `z`: `softmax(z) - p`.
pub fn softmax_ce_grad(p: &ProbVector, z: &Logits) -> Result<Vector> {
    same_len(p.len(), z.len(), "softmax CE gradient")?;
    let q = softmax(z)?;
    Ok(q.into_inner() - p.as_array())
}

fn check_ensemble(
    p: &ProbVector,
    q_all: &[ProbVector],
    k: usize,
    coeff: &AceCoefficients,
) -> Result<()> {
    if q_all.len() != coeff.k() {
        return Err(AceError::dim(format!(
            "{} predictions for an ensemble of {}",
            q_all.len(),
            coeff.k()
        )));
    }
    if k >= q_all.len() {
        return Err(AceError::IndexOutOfRange {
            index: k,
            len: q_all.len(),
        });
    }
    for q in q_all {
        same_len(p.len(), q.len(), "ensemble prediction")?;
    }
    Ok(())
}

fn require_alpha(coeff: &AceCoefficients) -> Result<&[f64]> {
    coeff
        .alpha()
        .ok_or_else(|| AceError::config("alpha", "weighted ACE needs aggregation weights"))
}

/// Uniform average of the member distributions.
pub fn ensemble_mean(q_all: &[ProbVector]) -> Result<ProbVector> {
    let first = q_all
        .first()
        .ok_or_else(|| AceError::InvalidInput("empty ensemble".into()))?;
    let mut acc = Vector::zeros(first.len());
    for q in q_all {
        same_len(first.len(), q.len(), "ensemble prediction")?;
        acc += q.as_array();
    }
    acc /= q_all.len() as f64;
    Ok(ProbVector::from_unchecked(acc))
}

fn weighted_mean(q_all: &[ProbVector], alpha: &[f64]) -> Vector {
    let mut acc = Vector::zeros(q_all[0].len());
    for (q, &a) in q_all.iter().zip(alpha) {
        acc.scaled_add(a, q.as_array());
    }
    acc
}

/// ACE loss of model `k`: `H(p, q^k) - (λ/K) Σ_{j≠k} H(q^j, q^k)`.
pub fn ace_loss(
    p: &ProbVector,
    q_all: &[ProbVector],
    k: usize,
    coeff: &AceCoefficients,
) -> Result<f64> {
    check_ensemble(p, q_all, k, coeff)?;
    let qk = q_all[k].view();
    let peer_sum: f64 = q_all
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, qj)| ce_raw(qj.view(), qk))
        .sum();
    Ok(ce_raw(p.view(), qk) - coeff.lambda() / coeff.k() as f64 * peer_sum)
}

/// The same loss written against the ensemble mean:
/// `H(p, q^k) - λ H(q̄, q^k) + (λ/K) H(q^k)`.
pub fn ace_loss_ensemble_form(
    p: &ProbVector,
    q_all: &[ProbVector],
    k: usize,
    coeff: &AceCoefficients,
) -> Result<f64> {
    check_ensemble(p, q_all, k, coeff)?;
    let qbar = ensemble_mean(q_all)?;
    let qk = q_all[k].view();
    let lambda = coeff.lambda();
    Ok(ce_raw(p.view(), qk) - lambda * ce_raw(qbar.view(), qk)
        + lambda / coeff.k() as f64 * ce_raw(qk, qk))
}

/// Gradient of the ACE loss of model `k` with respect to its logits `z^k`,
/// `(1 - λ)(q^k - p) + λ(q̄ - p)`, with the other members held fixed.
pub fn ace_grad_logits(
    p: &ProbVector,
    q_all: &[ProbVector],
    k: usize,
    coeff: &AceCoefficients,
) -> Result<Vector> {
    check_ensemble(p, q_all, k, coeff)?;
    let qbar = ensemble_mean(q_all)?;
    Ok(diversity_grad(
        p.view(),
        q_all[k].view(),
        qbar.view(),
        coeff.lambda(),
    ))
}

/// `(q^k - p) + λ(q̄ - q^k)`. At `λ = 0` this is bitwise `q^k - p`.
fn diversity_grad(
    p: ArrayView1<'_, f64>,
    qk: ArrayView1<'_, f64>,
    qbar: ArrayView1<'_, f64>,
    lambda: f64,
) -> Vector {
    Zip::from(&p)
        .and(&qk)
        .and(&qbar)
        .map_collect(|&p, &q, &m| (q - p) + lambda * (m - q))
}

/// Weighted ACE loss: `H(p, q^k) - λ Σ_{j≠k} α^j H(q^j, q^k)`.
pub fn ace_weighted_loss(
    p: &ProbVector,
    q_all: &[ProbVector],
    k: usize,
    coeff: &AceCoefficients,
) -> Result<f64> {
    let alpha = require_alpha(coeff)?;
    check_ensemble(p, q_all, k, coeff)?;
    let qk = q_all[k].view();
    let peer_sum: f64 = q_all
        .iter()
        .zip(alpha)
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, (qj, &a))| a * ce_raw(qj.view(), qk))
        .sum();
    Ok(ce_raw(p.view(), qk) - coeff.lambda() * peer_sum)
}

/// Gradient of [`ace_weighted_loss`] with respect to `z^k`:
/// `(q^k - p) - λ Σ_{j≠k} α^j (q^k - q^j)`.
pub fn ace_weighted_grad_logits(
    p: &ProbVector,
    q_all: &[ProbVector],
    k: usize,
    coeff: &AceCoefficients,
) -> Result<Vector> {
    let alpha = require_alpha(coeff)?;
    check_ensemble(p, q_all, k, coeff)?;
    let qbar = weighted_mean(q_all, alpha);
    Ok(diversity_grad(
        p.view(),
        q_all[k].view(),
        qbar.view(),
        coeff.lambda(),
    ))
}

/// Row-wise logit gradients of member `k` for a batch.
///
/// `q_all[j]` holds member `j`'s softmax outputs (one row per sample), all
/// computed before any member is updated. Uses the weighted form when
/// `coeff` carries aggregation weights.
pub fn ace_grad_logits_batch(
    p: ArrayView2<'_, f64>,
    q_all: &[Matrix],
    k: usize,
    coeff: &AceCoefficients,
) -> Result<Matrix> {
    check_batch(p, q_all, k, coeff)?;
    let qbar = weighted_batch_mean(q_all, coeff);
    let lambda = coeff.lambda();
    Ok(Zip::from(&p)
        .and(&q_all[k])
        .and(&qbar)
        .map_collect(|&p, &q, &m| (q - p) + lambda * (m - q)))
}

/// Batch-mean ACE loss of member `k`, evaluated in the ensemble form (or the
/// weighted form when `coeff` carries weights).
pub fn ace_loss_batch(
    p: ArrayView2<'_, f64>,
    q_all: &[Matrix],
    k: usize,
    coeff: &AceCoefficients,
) -> Result<f64> {
    check_batch(p, q_all, k, coeff)?;
    let n = p.nrows();
    let lambda = coeff.lambda();
    let qk = &q_all[k];
    let total: f64 = match coeff.alpha() {
        None => {
            let qbar = weighted_batch_mean(q_all, coeff);
            (0..n)
                .map(|i| {
                    let q = qk.row(i);
                    ce_raw(p.row(i), q) - lambda * ce_raw(qbar.row(i), q)
                        + lambda / coeff.k() as f64 * ce_raw(q, q)
                })
                .sum()
        }
        Some(alpha) => (0..n)
            .map(|i| {
                let q = qk.row(i);
                let peers: f64 = (0..coeff.k())
                    .filter(|&j| j != k)
                    .map(|j| alpha[j] * ce_raw(q_all[j].row(i), q))
                    .sum();
                ce_raw(p.row(i), q) - lambda * peers
            })
            .sum(),
    };
    Ok(total / n as f64)
}

fn check_batch(
    p: ArrayView2<'_, f64>,
    q_all: &[Matrix],
    k: usize,
    coeff: &AceCoefficients,
) -> Result<()> {
    if q_all.len() != coeff.k() {
        return Err(AceError::dim(format!(
            "{} prediction batches for an ensemble of {}",
            q_all.len(),
            coeff.k()
        )));
    }
    if k >= q_all.len() {
        return Err(AceError::IndexOutOfRange {
            index: k,
            len: q_all.len(),
        });
    }
    if let Some(q) = q_all.iter().find(|q| q.dim() != p.dim()) {
        return Err(AceError::dim(format!(
            "labels are {:?} but predictions are {:?}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// `Σ_j w_j q^j` row-wise, with `w_j` from [`AceCoefficients::weight`].
pub fn weighted_batch_mean(q_all: &[Matrix], coeff: &AceCoefficients) -> Matrix {
    let mut acc = Matrix::zeros(q_all[0].dim());
    match coeff.alpha() {
        None => {
            for q in q_all {
                acc += q;
            }
            acc /= q_all.len() as f64;
        }
        Some(alpha) => {
            for (q, &a) in q_all.iter().zip(alpha) {
                acc.scaled_add(a, q);
            }
        }
    }
    acc
}

/// NCL loss of one member: `½(F^k - Y)² - γ(F^k - F̄)²`.
pub fn ncl_loss(fk: f64, y: f64, f_bar: f64, coeff: &NclCoefficients) -> f64 {
    0.5 * (fk - y).powi(2) - coeff.gamma() * (fk - f_bar).powi(2)
}

/// `(1 - λ)(F^k - Y) + λ(F̄ - Y)`, the derivative of [`ncl_loss`] with
/// respect to `F^k` when `F̄` is the mean of all members (so it moves with
/// `F^k` at rate `1/K`).
pub fn ncl_grad(fk: f64, y: f64, f_bar: f64, coeff: &NclCoefficients) -> f64 {
    let lambda = coeff.lambda();
    (1.0 - lambda) * (fk - y) + lambda * (f_bar - y)
}

/// Central differences `(f(z + h e_i) - f(z - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, z0: &Vector, h: f64) -> Vector
where
    F: FnMut(&Vector) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive, got {h}");
    let mut z = z0.clone();
    Array1::from_shape_fn(z0.len(), |i| {
        let orig = z[i];
        z[i] = orig + h;
        let up = f(&z);
        z[i] = orig - h;
        let down = f(&z);
        z[i] = orig;
        (up - down) / (2.0 * h)
    })
}

/// Worst-case disagreement between an analytic and a numerical gradient.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct GradComparison {
    pub max_abs: f64,
    /// Largest `|a - n| / max(|a|, |n|)` among entries above the absolute floor.
    pub max_rel: f64,
    pub passed: bool,
}

impl GradComparison {
    pub fn merge(self, other: GradComparison) -> GradComparison {
        GradComparison {
            max_abs: self.max_abs.max(other.max_abs),
            max_rel: self.max_rel.max(other.max_rel),
            passed: self.passed && other.passed,
        }
    }
}

/// Entry `i` passes when `|a_i - n_i| <= abs_floor` or
/// `|a_i - n_i| <= rel_tol · max(|a_i|, |n_i|)`.
pub fn compare_gradients<'a, 'b>(
    analytic: impl IntoIterator<Item = &'a f64>,
    numeric: impl IntoIterator<Item = &'b f64>,
    rel_tol: f64,
    abs_floor: f64,
) -> GradComparison {
    let mut out = GradComparison {
        passed: true,
        ..Default::default()
    };
    for (&a, &n) in analytic.into_iter().zip(numeric) {
        let diff = (a - n).abs();
        out.max_abs = out.max_abs.max(diff);
        if diff > abs_floor {
            let rel = diff / a.abs().max(n.abs());
            out.max_rel = out.max_rel.max(rel);
            if rel > rel_tol {
                out.passed = false;
            }
        }
        if !diff.is_finite() {
            out.passed = false;
        }
    }
    out
}
